//! Hyperparameter estimation for the conjugate inverse-chi-square prior on
//! genewise variances: the standard moment-matching fit, the robust fit on
//! Winsorized variances, the covariate trend, and the gene-specific prior
//! degrees of freedom that shield the fit from hypervariable genes.

use crate::error::{Error, Result};
use crate::lowess::lowess;
use crate::quadrature::{winsorized_log_f_moments, WinsorSpec, DEFAULT_QUAD_POINTS};
use crate::specfun::{
    digamma, f_cdf, f_quantile, f_quantile_from_sf, f_sf, trigamma, trigamma_inverse,
};

const LN_HALF: f64 = -std::f64::consts::LN_2;

/// Estimated prior for the genewise variances.
///
/// `s02`, `d0g` and `pi` have one entry per gene (including unusable genes,
/// which carry the neutral values pi = 1, d0g = d0).
#[derive(Debug, Clone)]
pub struct Hyperprior {
    /// Prior degrees of freedom shared by non-outlier genes; may be infinite.
    pub d0: f64,
    /// Per-gene prior variance s0g^2 (constant unless a trend was fit).
    pub s02: Vec<f64>,
    /// Per-gene prior degrees of freedom, in [d_outlier, d0].
    pub d0g: Vec<f64>,
    /// Lower bound for the prior df, from the largest variance ratio.
    pub d_outlier: f64,
    /// Posterior probability that each gene is NOT an outlier.
    pub pi: Vec<f64>,
    pub trend_enabled: bool,
}

impl Hyperprior {
    /// Constant-prior constructor used by the standard (non-robust) path.
    fn uniform(d0: f64, s02: Vec<f64>, n: usize, trend_enabled: bool) -> Self {
        Hyperprior {
            d0,
            s02,
            d0g: vec![d0; n],
            d_outlier: d0,
            pi: vec![1.0; n],
            trend_enabled,
        }
    }

    pub fn n_genes(&self) -> usize {
        self.d0g.len()
    }

    /// Count of genes whose prior df was pulled below d0.
    pub fn n_shrunk(&self) -> usize {
        self.d0g.iter().filter(|&&d| d < self.d0).count()
    }

    /// Count of decisive outlier calls: posterior odds at least 9:1 that the
    /// gene is hypervariable (pi below 0.1).
    pub fn n_flagged(&self) -> usize {
        self.pi.iter().filter(|&&w| w < 0.1).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_genes();
        if self.s02.len() != n || self.pi.len() != n {
            return Err(Error::Dimension(
                "hyperprior vectors disagree in length".into(),
            ));
        }
        if !(self.d0 > 0.0) {
            return Err(Error::InvalidData(format!(
                "d0 = {} must be positive",
                self.d0
            )));
        }
        if !(self.d_outlier > 0.0) || self.d_outlier > self.d0 {
            return Err(Error::InvalidData(format!(
                "d_outlier = {} must lie in (0, d0 = {}]",
                self.d_outlier, self.d0
            )));
        }
        for g in 0..n {
            if !(self.s02[g] > 0.0) {
                return Err(Error::InvalidData(format!(
                    "s02[{g}] = {} not positive",
                    self.s02[g]
                )));
            }
            if !(0.0..=1.0).contains(&self.pi[g]) {
                return Err(Error::InvalidData(format!(
                    "pi[{g}] = {} not in [0,1]",
                    self.pi[g]
                )));
            }
            if self.d0g[g] < self.d_outlier || self.d0g[g] > self.d0 {
                return Err(Error::InvalidData(format!(
                    "d0g[{g}] = {} outside [{}, {}]",
                    self.d0g[g], self.d_outlier, self.d0
                )));
            }
            if self.pi[g] == 1.0 && self.d0g[g] != self.d0 {
                return Err(Error::InvalidData(format!(
                    "d0g[{g}] != d0 although pi = 1"
                )));
            }
        }
        Ok(())
    }
}

/// Scale estimate from `fit_fdist`: a single s0^2 or a per-gene trend.
#[derive(Debug, Clone)]
pub enum PriorScale {
    Constant(f64),
    PerGene(Vec<f64>),
}

impl PriorScale {
    pub fn value_for(&self, gene: usize) -> f64 {
        match self {
            PriorScale::Constant(v) => *v,
            PriorScale::PerGene(v) => v[gene],
        }
    }

    fn into_vec(self, n: usize) -> Vec<f64> {
        match self {
            PriorScale::Constant(v) => vec![v; n],
            PriorScale::PerGene(v) => v,
        }
    }
}

/// Result of the standard moment-matching fit.
#[derive(Debug, Clone)]
pub struct FDistFit {
    pub d0: f64,
    pub scale: PriorScale,
}

/// Options for `estimate_hyperprior`.
#[derive(Debug, Clone)]
pub struct HyperpriorOptions {
    pub robust: bool,
    pub winsor: WinsorSpec,
    pub quad_points: usize,
    pub span: f64,
}

impl Default for HyperpriorOptions {
    fn default() -> Self {
        HyperpriorOptions {
            robust: false,
            winsor: WinsorSpec::default(),
            quad_points: DEFAULT_QUAD_POINTS,
            span: 0.4,
        }
    }
}

/// Top-level entry: standard or robust estimation, optional covariate trend.
/// Unusable genes (df <= 0 or non-finite s2) are skipped for estimation and
/// receive neutral per-gene values.
pub fn estimate_hyperprior(
    s2: &[f64],
    df: &[f64],
    covariate: Option<&[f64]>,
    opts: &HyperpriorOptions,
) -> Result<Hyperprior> {
    if opts.robust {
        fit_fdist_robustly(s2, df, opts.winsor, covariate, opts.quad_points, opts.span)
    } else {
        let fit = fit_fdist_with_span(s2, df, covariate, opts.span)?;
        let n = s2.len();
        let trend = covariate.is_some();
        Ok(Hyperprior::uniform(fit.d0, fit.scale.into_vec(n), n, trend))
    }
}

// ---------------------------------------------------------------------------
// Standard (non-robust) moment estimation
// ---------------------------------------------------------------------------

/// Moment-matching fit of the scaled F model s2 ~ s0^2 F(df, d0).
///
/// With a covariate, the location of the log variances is modelled by a
/// smooth of the covariate and the returned scale is per gene.
pub fn fit_fdist(s2: &[f64], df: &[f64], covariate: Option<&[f64]>) -> Result<FDistFit> {
    fit_fdist_with_span(s2, df, covariate, 0.4)
}

pub fn fit_fdist_with_span(
    s2: &[f64],
    df: &[f64],
    covariate: Option<&[f64]>,
    span: f64,
) -> Result<FDistFit> {
    let n = s2.len();
    if df.len() != n {
        return Err(Error::Dimension("s2 and df lengths differ".into()));
    }
    if let Some(cov) = covariate {
        if cov.len() != n {
            return Err(Error::Dimension("covariate length differs from s2".into()));
        }
    }
    let usable = usable_indices(s2, df);
    if usable.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 usable genes for hyperparameter estimation, got {}",
            usable.len()
        )));
    }
    let floor = positive_floor(s2, &usable)?;

    // e_g = log s2 - psi(df/2) + log(df/2), whose mean and variance identify
    // (s0^2, d0) through the log-F moments
    let mut e = Vec::with_capacity(usable.len());
    let mut mean_tri = 0.0;
    for &g in &usable {
        let d = df[g];
        e.push(s2[g].max(floor).ln() - digamma(0.5 * d)? + (0.5 * d).ln());
        mean_tri += trigamma(0.5 * d)?;
    }
    mean_tri /= usable.len() as f64;

    let (emean_per_gene, evar) = if let Some(cov) = covariate {
        let covu: Vec<f64> = usable.iter().map(|&g| cov[g]).collect();
        let fitted = fit_trend(&e, &covu, false, span)?;
        let m = e.len() as f64;
        let evar = e
            .iter()
            .zip(&fitted)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (m - 1.0);
        (Some((covu, fitted)), evar)
    } else {
        let m = e.len() as f64;
        let emean = e.iter().sum::<f64>() / m;
        let evar = e.iter().map(|v| (v - emean) * (v - emean)).sum::<f64>() / (m - 1.0);
        (None, evar)
    };

    let head = evar - mean_tri;
    let (d0, offset) = if head > 0.0 {
        let d0 = 2.0 * trigamma_inverse(head)?;
        let off = if d0.is_finite() {
            digamma(0.5 * d0)? - (0.5 * d0).ln()
        } else {
            0.0
        };
        (d0, off)
    } else {
        (f64::INFINITY, 0.0)
    };

    let scale = match emean_per_gene {
        None => {
            let emean = e.iter().sum::<f64>() / e.len() as f64;
            PriorScale::Constant((emean + offset).exp())
        }
        Some((covu, fitted)) => {
            let table = TrendTable::build(&covu, &fitted);
            let cov = covariate.unwrap();
            let s02: Vec<f64> = (0..n)
                .map(|g| (table.predict(cov[g]) + offset).exp())
                .collect();
            PriorScale::PerGene(s02)
        }
    };
    Ok(FDistFit { d0, scale })
}

/// Transform variances with unequal residual df to a common df = max(df),
/// preserving each gene's quantile under the fitted scaled-F law.
pub fn equalize_df(s2: &[f64], df: &[f64], d0: f64, s02: f64) -> Result<Vec<f64>> {
    if !(d0 > 0.0) || !(s02 > 0.0) {
        return Err(Error::domain(
            "equalize_df",
            format!("d0 = {d0} and s02 = {s02} must be positive"),
        ));
    }
    let usable = usable_indices(s2, df);
    let d = usable.iter().map(|&g| df[g]).fold(0.0_f64, f64::max);
    if d == 0.0 {
        return Ok(s2.to_vec());
    }
    let mut out = s2.to_vec();
    for &g in &usable {
        if df[g] == d {
            continue;
        }
        let r = s2[g] / s02;
        let pl = f_cdf(r, df[g], d0)?;
        if !pl.is_finite() {
            return Err(Error::Numerical(format!(
                "equalize_df: non-finite probability for gene {g}"
            )));
        }
        out[g] = if pl <= 0.0 {
            0.0
        } else if pl <= 0.5 {
            s02 * f_quantile(pl, d, d0)?
        } else {
            // invert through the survival function so extreme upper-tail
            // ratios keep their quantile exactly
            let q = f_sf(r, df[g], d0)?.max(1e-300);
            s02 * f_quantile_from_sf(q, d, d0)?
        };
    }
    Ok(out)
}

/// Clamp values outside the empirical lower-p_l / upper-p_u quantiles to
/// those quantiles (type-7 linear interpolation of order statistics).
pub fn winsorize(values: &[f64], spec: WinsorSpec) -> Result<(Vec<f64>, f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidData("winsorize: empty input".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "winsorize: inputs must be finite".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q_l = quantile_type7(&sorted, spec.lower());
    let q_u = quantile_type7(&sorted, 1.0 - spec.upper());
    let clamped = values.iter().map(|&v| v.clamp(q_l, q_u)).collect();
    Ok((clamped, q_l, q_u))
}

fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

// ---------------------------------------------------------------------------
// Robust estimation
// ---------------------------------------------------------------------------

/// Robust hyperparameter estimation: Winsorized moment matching for
/// (d0, s0^2), followed by the gene-specific prior df assignment from the
/// outlier posteriors.
pub fn fit_fdist_robustly(
    s2: &[f64],
    df: &[f64],
    spec: WinsorSpec,
    covariate: Option<&[f64]>,
    quad_points: usize,
    span: f64,
) -> Result<Hyperprior> {
    let n = s2.len();
    if df.len() != n {
        return Err(Error::Dimension("s2 and df lengths differ".into()));
    }
    if let Some(cov) = covariate {
        if cov.len() != n {
            return Err(Error::Dimension("covariate length differs from s2".into()));
        }
    }
    let usable = usable_indices(s2, df);
    if usable.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 usable genes for hyperparameter estimation, got {}",
            usable.len()
        )));
    }
    let floor = positive_floor(s2, &usable)?;

    // variances on the detrended scale (identity when no covariate)
    let mut x: Vec<f64> = usable.iter().map(|&g| s2[g].max(floor)).collect();
    let dfu: Vec<f64> = usable.iter().map(|&g| df[g]).collect();

    let trend_table = if let Some(cov) = covariate {
        let covu: Vec<f64> = usable.iter().map(|&g| cov[g]).collect();
        let z: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let fitted = fit_trend(&z, &covu, true, span)?;
        for (v, f) in x.iter_mut().zip(&fitted) {
            *v = (v.ln() - f).exp();
        }
        Some(TrendTable::build(&covu, &fitted))
    } else {
        None
    };

    // equal residual df required by the Winsorized moment match
    let d = dfu.iter().fold(0.0_f64, |a, &b| a.max(b));
    let x_eq = if dfu.iter().any(|&v| v != d) {
        let pre = fit_fdist(&x, &dfu, None)?;
        let s02_pre = match pre.scale {
            PriorScale::Constant(v) => v,
            PriorScale::PerGene(_) => unreachable!("no covariate passed"),
        };
        equalize_df(&x, &dfu, pre.d0, s02_pre)?
    } else {
        x.clone()
    };

    // Winsorized log moments of the sample
    let (xw, _q_l, _q_u) = winsorize(&x_eq, spec)?;
    let zw: Vec<f64> = xw.iter().map(|v| v.max(floor).ln()).collect();
    let m = zw.len() as f64;
    let zmean = zw.iter().sum::<f64>() / m;
    let zvar = zw.iter().map(|v| (v - zmean) * (v - zmean)).sum::<f64>() / (m - 1.0);

    // match the Winsorized variance, then the mean
    let d0 = solve_winsorized_d0(d, zvar, spec, quad_points)?;
    let (nu, _) = winsorized_log_f_moments(d, d0, spec, quad_points)?;
    let s20 = (zmean - nu).exp();

    // outlier p-values from the fitted prior (detrended scale, own df)
    let mut p_out = Vec::with_capacity(usable.len());
    for (i, &v) in x.iter().enumerate() {
        p_out.push(f_sf(v / s20, dfu[i], d0)?);
    }
    let s2max_ratio = x_eq.iter().fold(0.0_f64, |a, &b| a.max(b / s20));
    let d_out = solve_d_outlier(s2max_ratio, d, d0)?;
    let pi_u = outlier_posterior(&p_out)?;
    let d0g_u = assign_d0g(d0, d_out, &pi_u);

    // expand to full gene set; unusable genes take the neutral prior
    let mut s02 = vec![f64::NAN; n];
    let mut pi = vec![1.0_f64; n];
    let mut d0g = vec![d0; n];
    for (i, &g) in usable.iter().enumerate() {
        pi[g] = pi_u[i];
        d0g[g] = d0g_u[i];
    }
    match (&trend_table, covariate) {
        (Some(table), Some(cov)) => {
            for g in 0..n {
                s02[g] = (table.predict(cov[g])).exp() * s20;
            }
        }
        _ => {
            s02.fill(s20);
        }
    }

    let hp = Hyperprior {
        d0,
        s02,
        d0g,
        d_outlier: d_out,
        pi,
        trend_enabled: trend_table.is_some(),
    };
    hp.validate()?;
    Ok(hp)
}

/// Solve phi(d, d0) = zvar for d0 over (1e-2, +inf]; phi is strictly
/// decreasing in d0. Under-dispersed samples (zvar below the d0 = inf limit)
/// give d0 = inf; samples more dispersed than the d0 = 1e-2 end clamp there.
fn solve_winsorized_d0(d: f64, zvar: f64, spec: WinsorSpec, k: usize) -> Result<f64> {
    // evaluation failures deep in the heavy-tailed end (the unit-interval
    // transform degenerates in f64) are treated as phi = +inf, which is the
    // correct limit for bracketing
    let phi_at = |d0: f64| -> f64 {
        winsorized_log_f_moments(d, d0, spec, k)
            .map(|(_, phi)| phi)
            .unwrap_or(f64::INFINITY)
    };
    let phi_inf = winsorized_log_f_moments(d, f64::INFINITY, spec, k)?.1;
    if zvar <= phi_inf {
        return Ok(f64::INFINITY);
    }
    const D0_MIN: f64 = 1e-2;
    let f_lo = phi_at(D0_MIN) - zvar;
    if f_lo <= 0.0 {
        return Ok(D0_MIN);
    }

    // bracket [t_lo, t_hi] in log-d0 with a sign change
    let mut t_lo = D0_MIN.ln();
    let mut f_t_lo = f_lo;
    let mut t_hi = 0.0_f64; // d0 = 1
    let mut f_t_hi = phi_at(t_hi.exp()) - zvar;
    while f_t_hi > 0.0 {
        t_lo = t_hi;
        f_t_lo = f_t_hi;
        t_hi += std::f64::consts::LN_2 * 2.0;
        if t_hi > 30.0 {
            return Ok(f64::INFINITY);
        }
        f_t_hi = phi_at(t_hi.exp()) - zvar;
    }

    // secant with bisection safeguard; tolerance 1e-8 on the moment equation
    let mut t0 = t_lo;
    let mut f0 = f_t_lo;
    let mut t1 = t_hi;
    let mut f1 = f_t_hi;
    for _ in 0..200 {
        let mut t2 = if (f1 - f0).abs() > 0.0 {
            t1 - f1 * (t1 - t0) / (f1 - f0)
        } else {
            0.5 * (t_lo + t_hi)
        };
        if !(t2 > t_lo && t2 < t_hi) {
            t2 = 0.5 * (t_lo + t_hi);
        }
        let f2 = phi_at(t2.exp()) - zvar;
        if f2.abs() <= 1e-8 {
            return Ok(t2.exp());
        }
        if f2 > 0.0 {
            t_lo = t2;
        } else {
            t_hi = t2;
        }
        t0 = t1;
        f0 = f1;
        t1 = t2;
        f1 = f2;
        if (t_hi - t_lo).abs() < 1e-14 {
            return Ok(t2.exp());
        }
    }
    Err(Error::Numerical(
        "winsorized moment equation did not converge".into(),
    ))
}

// ---------------------------------------------------------------------------
// d_outlier
// ---------------------------------------------------------------------------

/// Prior df at which the largest observed variance ratio sits at the median
/// of its F law: solves F-survival(s2max_ratio; d_g, d_out) = 0.5 to 1e-6 in
/// probability. The result never exceeds d0.
pub fn solve_d_outlier(s2max_ratio: f64, d_g: f64, d0: f64) -> Result<f64> {
    Ok(solve_d_outlier_iterations(s2max_ratio, d_g, d0)?.0)
}

/// As `solve_d_outlier`, also reporting the number of Newton updates used.
///
/// The solve seeds from the log-F mean identity (digamma only) and refines
/// with modified-Newton steps on ln(-ln survival) as a function of ln d,
/// where the relation is close to affine; two to three updates reach 1e-6.
/// A monotone fallback iteration d <- d ln(1/2)/ln(survival) guards the
/// unlikely unconverged case.
pub fn solve_d_outlier_iterations(s2max_ratio: f64, d_g: f64, d0: f64) -> Result<(f64, usize)> {
    if !(s2max_ratio > 0.0) {
        return Err(Error::domain(
            "solve_d_outlier",
            format!("s2max_ratio = {s2max_ratio} must be positive"),
        ));
    }
    if !(d_g > 0.0) || !d_g.is_finite() || !(d0 > 0.0) {
        return Err(Error::domain(
            "solve_d_outlier",
            format!("invalid degrees of freedom d_g = {d_g}, d0 = {d0}"),
        ));
    }
    let p0 = f_sf(s2max_ratio, d_g, d0)?;
    if p0 >= 0.5 - 1e-6 {
        // the maximum is already at or below the median of the d0 law
        return Ok((d0, 0));
    }

    let target = std::f64::consts::LN_2.ln(); // ln(-ln(1/2))
    let seed =
        median_identity_seed(s2max_ratio, d_g).unwrap_or(if d0.is_finite() { d0 } else { 1e8 });
    let mut t = seed.min(if d0.is_finite() { d0 } else { f64::MAX }).ln();
    let mut updates = 0usize;
    for _ in 0..16 {
        let p = f_sf(s2max_ratio, d_g, t.exp())?;
        if (p - 0.5).abs() <= 1e-6 {
            return Ok((t.exp().min(d0), updates));
        }
        if p <= 0.0 {
            t -= 2.0;
            updates += 1;
            continue;
        }
        let y = (-p.ln()).ln();
        let h = 0.05;
        let p2 = f_sf(s2max_ratio, d_g, (t + h).exp())?;
        let step = if p2 > 0.0 && p2 < 1.0 {
            let slope = ((-p2.ln()).ln() - y) / h;
            if slope.is_finite() && slope != 0.0 {
                (target - y) / slope
            } else {
                f64::NAN
            }
        } else {
            f64::NAN
        };
        if step.is_finite() {
            t += step;
        } else {
            // multiplicative update, exact when log survival scales with df
            t = (t.exp() * LN_HALF / p.ln()).ln();
        }
        updates += 1;
    }

    // monotone fallback iteration
    let mut dcur = t.exp();
    for _ in 0..32 {
        let p = f_sf(s2max_ratio, d_g, dcur)?;
        if (p - 0.5).abs() <= 1e-6 {
            return Ok((dcur.min(d0), updates));
        }
        dcur *= LN_HALF / p.ln();
        updates += 1;
    }
    Err(Error::Numerical(format!(
        "d_outlier solve did not converge for ratio {s2max_ratio}, d_g {d_g}, d0 {d0}"
    )))
}

/// Initial guess for d_outlier from E(log F) = psi(d_g/2) - psi(d/2) +
/// log(d/d_g) = log m, solved for d by Newton on digamma. Returns None when
/// the identity has no solution (m at or below the chi-square-limit center).
fn median_identity_seed(m: f64, d_g: f64) -> Option<f64> {
    let r = m.ln() - digamma(0.5 * d_g).ok()? + d_g.ln();
    if r <= std::f64::consts::LN_2 + 1e-9 {
        return None;
    }
    let mut d = 1.0_f64;
    for _ in 0..60 {
        let g = d.ln() - digamma(0.5 * d).ok()? - r;
        let gp = 1.0 / d - 0.5 * trigamma(0.5 * d).ok()?;
        let step = g / gp;
        let next = d - step;
        d = if next > 0.0 { next } else { 0.5 * d };
        if step.abs() <= 1e-9 * d {
            break;
        }
    }
    (d.is_finite() && d > 0.0).then_some(d)
}

// ---------------------------------------------------------------------------
// Outlier posteriors and gene-specific prior df
// ---------------------------------------------------------------------------

/// Conservative posterior probabilities that each gene is not an outlier,
/// from the outlier p-values: pi = min(1, p/r) with r the empirical tail
/// probability (average ranks over ties), followed by the three-step
/// monotonicity enforcement (cumulative means, prefix-minimum replacement,
/// cumulative maximum). The output is non-decreasing in p and ties in p
/// receive equal pi.
pub fn outlier_posterior(p: &[f64]) -> Result<Vec<f64>> {
    let n = p.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain(
            "outlier_posterior",
            "p-values must lie in [0, 1]".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| p[i].partial_cmp(&p[j]).unwrap().then(i.cmp(&j)));

    // raw ratios with average ranks over tied p-values
    let mut raw = vec![0.0_f64; n]; // in sorted position
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && p[order[end]] == p[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end - 1) as f64 / 2.0 + 1.0; // 1-based
        let r = (avg_rank - 0.5) / n as f64;
        for item in raw.iter_mut().take(end).skip(start) {
            *item = (p[order[start]] / r).min(1.0);
        }
        start = end;
    }

    // cumulative means; replace the prefix up to the first minimum
    let mut cum = 0.0;
    let mut min_val = f64::INFINITY;
    let mut min_at = 0;
    for (i, &v) in raw.iter().enumerate() {
        cum += v;
        let mean = cum / (i + 1) as f64;
        if mean < min_val {
            min_val = mean;
            min_at = i;
        }
    }
    for item in raw.iter_mut().take(min_at + 1) {
        *item = min_val;
    }
    // cumulative maximum
    let mut running = f64::NEG_INFINITY;
    for item in raw.iter_mut() {
        running = running.max(*item);
        *item = running;
    }
    // equalize tied groups at the group maximum (keeps monotonicity)
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && p[order[end]] == p[order[start]] {
            end += 1;
        }
        let gmax = raw[start..end]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for item in raw.iter_mut().take(end).skip(start) {
            *item = gmax;
        }
        start = end;
    }

    let mut out = vec![0.0_f64; n];
    for (pos, &g) in order.iter().enumerate() {
        out[g] = raw[pos].clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Gene-specific prior df: the convex combination pi*d0 + (1-pi)*d_outlier.
/// With infinite d0 the combination is taken as its limit: d_outlier at
/// pi = 0, infinite otherwise.
pub fn assign_d0g(d0: f64, d_outlier: f64, pi: &[f64]) -> Vec<f64> {
    pi.iter()
        .map(|&w| {
            if w >= 1.0 {
                d0
            } else if w <= 0.0 {
                d_outlier
            } else if d0.is_infinite() {
                f64::INFINITY
            } else {
                (w * d0 + (1.0 - w) * d_outlier).clamp(d_outlier.min(d0), d0)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Covariate trend
// ---------------------------------------------------------------------------

/// Smooth of `z` against the covariate, evaluated at every gene. Fewer than
/// 50 points fall back to the constant (mean) fit; so does a constant
/// covariate.
pub fn fit_trend(z: &[f64], covariate: &[f64], robust: bool, span: f64) -> Result<Vec<f64>> {
    if z.len() != covariate.len() {
        return Err(Error::Dimension("trend inputs differ in length".into()));
    }
    let n = z.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < 50 || covariate.iter().all(|&v| v == covariate[0]) {
        let mean = z.iter().sum::<f64>() / n as f64;
        return Ok(vec![mean; n]);
    }
    lowess(covariate, z, span, if robust { 3 } else { 0 })
}

/// Piecewise-linear interpolation table over a fitted trend, used to
/// evaluate the trend at genes that were excluded from the fit.
struct TrendTable {
    xs: Vec<f64>,
    fs: Vec<f64>,
    mean: f64,
}

impl TrendTable {
    fn build(x: &[f64], fitted: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
        let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let fs: Vec<f64> = order.iter().map(|&i| fitted[i]).collect();
        let mean = fs.iter().sum::<f64>() / fs.len().max(1) as f64;
        TrendTable { xs, fs, mean }
    }

    fn predict(&self, x: f64) -> f64 {
        if self.xs.is_empty() || !x.is_finite() {
            return self.mean;
        }
        if x <= self.xs[0] {
            return self.fs[0];
        }
        if x >= *self.xs.last().unwrap() {
            return *self.fs.last().unwrap();
        }
        let idx = self.xs.partition_point(|&v| v < x);
        let (x0, x1) = (self.xs[idx - 1], self.xs[idx]);
        let (f0, f1) = (self.fs[idx - 1], self.fs[idx]);
        if x1 == x0 {
            0.5 * (f0 + f1)
        } else {
            f0 + (f1 - f0) * (x - x0) / (x1 - x0)
        }
    }
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn usable_indices(s2: &[f64], df: &[f64]) -> Vec<usize> {
    (0..s2.len())
        .filter(|&g| df[g] > 0.0 && df[g].is_finite() && s2[g].is_finite() && s2[g] >= 0.0)
        .collect()
}

/// Relative floor for zero variances before logging: median positive value
/// times 1e-12.
fn positive_floor(s2: &[f64], usable: &[usize]) -> Result<f64> {
    let mut pos: Vec<f64> = usable.iter().map(|&g| s2[g]).filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        return Err(Error::InvalidData(
            "all usable variances are zero; cannot estimate a prior".into(),
        ));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if pos.len() % 2 == 1 {
        pos[pos.len() / 2]
    } else {
        0.5 * (pos[pos.len() / 2 - 1] + pos[pos.len() / 2])
    };
    Ok(median * 1e-12)
}
