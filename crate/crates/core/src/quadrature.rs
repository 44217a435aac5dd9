//! Gauss-Legendre quadrature and the mean/variance of the log Winsorized
//! F-distribution.
//!
//! Nodes and weights come from the eigendecomposition of the symmetric
//! tridiagonal Jacobi matrix (Golub-Welsch), which stays stable at the
//! k = 128 order used by default.

use crate::error::{Error, Result};
use crate::specfun::{f_pdf, f_quantile};

/// Default number of quadrature nodes for the Winsorized moment integrals.
pub const DEFAULT_QUAD_POINTS: usize = 128;

/// A fixed quadrature rule on a finite interval. Weights sum to the interval
/// length, so `integrate` approximates the plain integral of the function.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    a: f64,
    b: f64,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// Approximate the integral of `f` over the rule's interval.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Winsorizing tail proportions; both must lie strictly between 0 and 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinsorSpec {
    lower: f64,
    upper: f64,
}

impl WinsorSpec {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        for (name, p) in [("lower", lower), ("upper", upper)] {
            if !(p > 0.0 && p < 0.5) {
                return Err(Error::domain(
                    "WinsorSpec",
                    format!("{name} tail proportion {p} must be strictly between 0 and 0.5"),
                ));
            }
        }
        Ok(WinsorSpec { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }
}

impl Default for WinsorSpec {
    fn default() -> Self {
        WinsorSpec {
            lower: 0.05,
            upper: 0.1,
        }
    }
}

/// Gauss-Legendre rule with `k` nodes on [a, b], exact for polynomials of
/// degree up to 2k - 1.
pub fn gauss_legendre(k: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    if k == 0 {
        return Err(Error::domain("gauss_legendre", "k must be at least 1"));
    }
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::domain(
            "gauss_legendre",
            format!("invalid interval [{a}, {b}]"),
        ));
    }

    // Jacobi matrix for Legendre polynomials: zero diagonal, off-diagonal
    // i / sqrt(4 i^2 - 1).
    let mut diag = vec![0.0_f64; k];
    let mut off = vec![0.0_f64; k];
    for i in 1..k {
        let fi = i as f64;
        off[i - 1] = fi / (4.0 * fi * fi - 1.0).sqrt();
    }
    // First eigenvector components give the weights; total mass on [-1, 1]
    // is 2.
    let mut z = vec![0.0_f64; k];
    z[0] = 1.0;
    tridiag_eigen(&mut diag, &mut off, &mut z)?;

    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let nodes: Vec<f64> = diag.iter().map(|&x| mid + half * x).collect();
    let weights: Vec<f64> = z.iter().map(|&c| 2.0 * c * c * half).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        a,
        b,
    })
}

/// Implicit-shift QL iteration for a symmetric tridiagonal matrix,
/// transforming the vector `z` along with the diagonalization (the classic
/// IMTQLX routine from the Golub-Welsch literature). On return `d` holds the
/// eigenvalues in ascending order and `z` the correspondingly permuted first
/// eigenvector components.
fn tridiag_eigen(d: &mut [f64], e: &mut [f64], z: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n == 1 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    let prec = f64::EPSILON;

    for l in 0..n {
        let mut iter = 0;
        loop {
            // find a small off-diagonal element
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= prec * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::Numerical(
                    "tridiagonal eigensolve failed to converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = (g * g + 1.0).sqrt();
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let bb = c * e[i];
                if f.abs() >= g.abs() {
                    c = g / f;
                    r = (c * c + 1.0).sqrt();
                    e[i + 1] = f * r;
                    s = 1.0 / r;
                    c *= s;
                } else {
                    s = f / g;
                    r = (s * s + 1.0).sqrt();
                    e[i + 1] = g * r;
                    c = 1.0 / r;
                    s *= c;
                }
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * bb;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - bb;
                f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    // sort eigenvalues ascending, permuting z alongside
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let sorted_d: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let sorted_z: Vec<f64> = order.iter().map(|&i| z[i]).collect();
    d.copy_from_slice(&sorted_d);
    z.copy_from_slice(&sorted_z);
    Ok(())
}

/// Mean and variance of log win(f) where f ~ F(d1, d0) and win clamps at the
/// lower-tail `p_l` and upper-tail `p_u` quantiles of that distribution.
///
/// The conditional part of each moment is mapped to the unit interval via
/// u/(1-u) and evaluated with a `k`-node Gauss-Legendre rule. Accuracy
/// degrades for tail proportions below about 1e-8, where the transformed
/// interval endpoints approach 0 and 1.
pub fn winsorized_log_f_moments(
    d1: f64,
    d0: f64,
    spec: WinsorSpec,
    k: usize,
) -> Result<(f64, f64)> {
    if !(d1 > 0.0) || !(d0 > 0.0) {
        return Err(Error::domain(
            "winsorized_log_f_moments",
            format!("degrees of freedom must be positive, got d1 = {d1}, d0 = {d0}"),
        ));
    }
    if k < 16 {
        return Err(Error::domain(
            "winsorized_log_f_moments",
            format!("k = {k} is below the minimum of 16 nodes"),
        ));
    }
    let p_l = spec.lower();
    let p_u = spec.upper();
    let q_l = f_quantile(p_l, d1, d0)?;
    let q_u = f_quantile(1.0 - p_u, d1, d0)?;
    let a = q_l / (1.0 + q_l);
    let b = q_u / (1.0 + q_u);
    let rule = gauss_legendre(k, a, b)?;

    // density of F pushed through x = u / (1 - u)
    let dens = |u: f64| {
        let x = u / (1.0 - u);
        f_pdf(x, d1, d0).unwrap_or(f64::NAN) / ((1.0 - u) * (1.0 - u))
    };

    let lql = q_l.ln();
    let lqu = q_u.ln();
    let nu = p_l * lql + rule.integrate(|u| (u / (1.0 - u)).ln() * dens(u)) + p_u * lqu;
    let phi = p_l * (lql - nu).powi(2)
        + rule.integrate(|u| {
            let dev = (u / (1.0 - u)).ln() - nu;
            dev * dev * dens(u)
        })
        + p_u * (lqu - nu).powi(2);

    if !nu.is_finite() || !(phi > 0.0) {
        return Err(Error::Numerical(format!(
            "winsorized moments not finite for d1 = {d1}, d0 = {d0}"
        )));
    }
    Ok((nu, phi))
}
