//! Posterior variance squeezing, moderated t and F statistics with exact
//! small-sample p-values, Benjamini-Hochberg adjustment, and ranked result
//! tables.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::hyperprior::{estimate_hyperprior, Hyperprior, HyperpriorOptions};
use crate::linmod::GeneFit;
use crate::specfun::{f_sf, t_tail2};

/// One row of the ranked results table.
#[derive(Debug, Clone)]
pub struct TopTableRow {
    pub gene_id: String,
    /// Estimate of the selected coefficient; NaN when the fit is unusable.
    pub log_fc: f64,
    /// Average log-expression; NaN when every value is missing.
    pub avg_expr: f64,
    /// Moderated t statistic; NaN when undefined.
    pub t: f64,
    pub p_value: f64,
    pub fdr: f64,
    /// Total degrees of freedom of the null law, d_g + d0g.
    pub df_total: f64,
    /// Gene-specific prior degrees of freedom.
    pub df_prior: f64,
    /// Posterior (squeezed) variance.
    pub s2_post: f64,
}

/// Moderated statistics for one coefficient across all genes, in gene order.
#[derive(Debug, Clone)]
pub struct EbFit {
    pub hyperprior: Hyperprior,
    pub s2_post: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub df_total: Vec<f64>,
    pub coefficient: usize,
}

/// Posterior variances: (d0g s0g^2 + d_g s2_g) / (d0g + d_g) with the
/// gene-specific prior substituted. Genes with zero residual df take the
/// prior variance itself.
pub fn squeeze_var(s2: &[Option<f64>], df: &[f64], hp: &Hyperprior) -> Vec<f64> {
    (0..s2.len())
        .map(|g| {
            let s0g = hp.s02[g];
            let d0g = hp.d0g[g];
            match s2[g] {
                None => s0g,
                Some(v) => {
                    if df[g] <= 0.0 || d0g.is_infinite() {
                        s0g
                    } else if d0g == 0.0 {
                        v
                    } else {
                        (d0g * s0g + df[g] * v) / (d0g + df[g])
                    }
                }
            }
        })
        .collect()
}

/// Moderated t statistic and two-sided p-value for one coefficient of one
/// gene. Returns None when the statistic is undefined (unusable fit or zero
/// unscaled standard deviation).
pub fn moderated_t(
    fit: &GeneFit,
    coefficient: usize,
    s2_post: f64,
    df_total: f64,
) -> Result<Option<(f64, f64)>> {
    if !(df_total > 0.0) {
        return Err(Error::domain(
            "moderated_t",
            format!("df_total = {df_total} must be positive"),
        ));
    }
    let (Some(beta), Some(sd)) = (&fit.beta, &fit.unscaled_sd) else {
        return Ok(None);
    };
    if coefficient >= beta.len() {
        return Err(Error::InvalidData(format!(
            "coefficient index {coefficient} out of range for {} coefficients",
            beta.len()
        )));
    }
    let denom = s2_post.sqrt() * sd[coefficient];
    if !(denom > 0.0) {
        return Ok(None);
    }
    let t = beta[coefficient] / denom;
    let p = t_tail2(t, df_total)?;
    Ok(Some((t, p)))
}

/// Moderated F statistic over a subset of coefficients: the classical
/// quadratic form with the squeezed variance in the denominator; p-value
/// from the F law on (|subset|, d_g + d0g) degrees of freedom.
pub fn moderated_f(fit: &GeneFit, subset: &[usize], s2_post: f64, d0g: f64) -> Result<(f64, f64)> {
    if subset.is_empty() {
        return Err(Error::InvalidData("empty coefficient subset".into()));
    }
    let (Some(beta), Some(cov)) = (&fit.beta, &fit.cov_unscaled) else {
        return Err(Error::InvalidData("fit has no coefficients".into()));
    };
    let p = beta.len();
    for &j in subset {
        if j >= p {
            return Err(Error::InvalidData(format!(
                "coefficient index {j} out of range"
            )));
        }
    }
    let k = subset.len();
    // C = cov_unscaled[subset, subset]; solve C u = beta_sub by Cholesky
    let mut c = vec![0.0_f64; k * k];
    let mut b = vec![0.0_f64; k];
    for (r, &jr) in subset.iter().enumerate() {
        b[r] = beta[jr];
        for (s, &js) in subset.iter().enumerate() {
            c[r * k + s] = cov[jr * p + js];
        }
    }
    let u = cholesky_solve(&mut c, &b, k)
        .ok_or_else(|| Error::Numerical("singular covariance submatrix in moderated F".into()))?;
    let quad: f64 = b.iter().zip(&u).map(|(x, y)| x * y).sum();
    let fstat = (quad / k as f64 / s2_post).max(0.0);
    let df2 = fit.df_residual + d0g;
    let p_value = f_sf(fstat, k as f64, df2)?;
    Ok((fstat, p_value))
}

// Cholesky factorization and solve for a small SPD system, in place.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

/// Benjamini-Hochberg step-up adjustment. NaN entries pass through as NaN
/// and do not count toward the number of tests.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..p.len()).filter(|&i| !p[i].is_nan()).collect();
    let m = idx.len();
    let mut out = vec![f64::NAN; p.len()];
    if m == 0 {
        return out;
    }
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut running = 1.0_f64;
    for (pos, &i) in idx.iter().enumerate() {
        let rank = m - pos; // descending traversal
        let adjusted = (p[i] * m as f64 / rank as f64).min(1.0);
        running = running.min(adjusted);
        out[i] = running;
    }
    out
}

/// Estimate the prior from the fits and compute moderated t statistics for
/// one coefficient. `trend` requires average expression values in the fits.
pub fn eb_moderate(
    fits: &[GeneFit],
    coefficient: usize,
    opts: &HyperpriorOptions,
    trend: bool,
) -> Result<EbFit> {
    let s2: Vec<f64> = fits.iter().map(|f| f.s2.unwrap_or(f64::NAN)).collect();
    let df: Vec<f64> = fits.iter().map(|f| f.df_residual).collect();
    let covariate: Option<Vec<f64>> = if trend {
        Some(
            fits.iter()
                .map(|f| f.avg_expr.unwrap_or(f64::NAN))
                .collect(),
        )
    } else {
        None
    };
    let hp = estimate_hyperprior(&s2, &df, covariate.as_deref(), opts)?;
    moderate_with(fits, coefficient, hp)
}

/// Moderated statistics for a prior that has already been estimated (or is
/// otherwise known).
pub fn moderate_with(fits: &[GeneFit], coefficient: usize, hp: Hyperprior) -> Result<EbFit> {
    let n = fits.len();
    let s2_opt: Vec<Option<f64>> = fits.iter().map(|f| f.s2).collect();
    let df: Vec<f64> = fits.iter().map(|f| f.df_residual).collect();
    let s2_post = squeeze_var(&s2_opt, &df, &hp);
    let mut t = vec![f64::NAN; n];
    let mut p = vec![f64::NAN; n];
    let mut df_total = vec![f64::NAN; n];
    for g in 0..n {
        let dt = df[g] + hp.d0g[g];
        df_total[g] = dt;
        if let Some((tg, pg)) = moderated_t(&fits[g], coefficient, s2_post[g], dt)? {
            t[g] = tg;
            p[g] = pg;
        }
    }
    Ok(EbFit {
        hyperprior: hp,
        s2_post,
        t,
        p,
        df_total,
        coefficient,
    })
}

/// Assemble the ranked table: rows sorted by p-value ascending with ties
/// broken by gene id; genes without statistics sort last. An FDR cutoff
/// keeps only rows with fdr <= cutoff.
pub fn top_table(
    gene_ids: &[String],
    fits: &[GeneFit],
    eb: &EbFit,
    fdr_cutoff: Option<f64>,
) -> Vec<TopTableRow> {
    let fdr = bh_adjust(&eb.p);
    let mut rows: Vec<TopTableRow> = (0..fits.len())
        .map(|g| TopTableRow {
            gene_id: gene_ids[g].clone(),
            log_fc: fits[g]
                .beta
                .as_ref()
                .map_or(f64::NAN, |b| b[eb.coefficient]),
            avg_expr: fits[g].avg_expr.unwrap_or(f64::NAN),
            t: eb.t[g],
            p_value: eb.p[g],
            fdr: fdr[g],
            df_total: eb.df_total[g],
            df_prior: eb.hyperprior.d0g[g],
            s2_post: eb.s2_post[g],
        })
        .collect();
    rows.sort_by(|a, b| nan_last(a.p_value, b.p_value).then_with(|| a.gene_id.cmp(&b.gene_id)));
    if let Some(cut) = fdr_cutoff {
        rows.retain(|r| r.fdr.is_finite() && r.fdr <= cut);
    }
    rows
}

fn nan_last(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.partial_cmp(&b).unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmod::{fit_gene, DesignMatrix};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn uniform_hp(n: usize, d0: f64, s02: f64) -> Hyperprior {
        Hyperprior {
            d0,
            s02: vec![s02; n],
            d0g: vec![d0; n],
            d_outlier: d0,
            pi: vec![1.0; n],
            trend_enabled: false,
        }
    }

    fn two_group_fit(y: &[f64]) -> GeneFit {
        let x = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ];
        let design = DesignMatrix::new(x, vec!["g1".into(), "g2".into()]).unwrap();
        fit_gene(y, &design, None).unwrap()
    }

    #[test]
    fn squeeze_endpoints_and_midpoint() {
        let df = [4.0];
        assert_abs_diff_eq!(
            squeeze_var(&[Some(1.0)], &df, &uniform_hp(1, 0.0, 0.5))[0],
            1.0,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            squeeze_var(&[Some(1.0)], &df, &uniform_hp(1, f64::INFINITY, 0.5))[0],
            0.5,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            squeeze_var(&[Some(1.0)], &df, &uniform_hp(1, 4.0, 0.5))[0],
            0.75,
            epsilon = 1e-15
        );
        // zero residual df: prior variance, not zero
        assert_abs_diff_eq!(
            squeeze_var(&[None], &[0.0], &uniform_hp(1, 4.0, 0.5))[0],
            0.5,
            epsilon = 0.0
        );
    }

    #[test]
    fn squeeze_between_inputs() {
        let hp = uniform_hp(1, 3.3, 0.4);
        let s = squeeze_var(&[Some(2.0)], &[4.0], &hp)[0];
        assert!(s > 0.4 && s < 2.0);
    }

    #[test]
    fn moderated_t_null_center() {
        let fit = two_group_fit(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        // contrast coefficient is group2 mean = 2; test the difference via
        // a fit where group means are equal: beta2 - 0 tested directly on
        // coefficient index 1 minus nothing -- use a zero-coefficient case
        let fitz = two_group_fit(&[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let (t, p) = moderated_t(&fitz, 0, fitz.s2.unwrap(), 8.0)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(t, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
        drop(fit);
    }

    #[test]
    fn moderated_t_reduces_to_classical_when_d0_zero() {
        let y = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let fit = two_group_fit(&y);
        let s2 = fit.s2.unwrap();
        // ordinary t for group2 mean: beta/sd, df = 4
        let (t, p) = moderated_t(&fit, 1, s2, fit.df_residual).unwrap().unwrap();
        let sd = fit.unscaled_sd.as_ref().unwrap()[1];
        let t_classic = fit.beta.as_ref().unwrap()[1] / (s2.sqrt() * sd);
        assert_abs_diff_eq!(t, t_classic, epsilon = 1e-12);
        let p_classic = crate::specfun::t_tail2(t_classic, 4.0).unwrap();
        assert_abs_diff_eq!(p, p_classic, epsilon = 1e-15);
    }

    #[test]
    fn moderated_t_undefined_cases() {
        let fit = two_group_fit(&[1.0, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN]);
        assert!(moderated_t(&fit, 0, 1.0, 5.0).unwrap().is_none());
    }

    #[test]
    fn f_equals_t_squared_for_single_coefficient() {
        let y = [1.0, 2.2, 2.8, 9.6, 11.0, 12.4];
        let fit = two_group_fit(&y);
        let s2p = 0.9;
        let d0g = 3.0;
        let (t, pt) = moderated_t(&fit, 1, s2p, fit.df_residual + d0g)
            .unwrap()
            .unwrap();
        let (f, pf) = moderated_f(&fit, &[1], s2p, d0g).unwrap();
        assert_abs_diff_eq!(f, t * t, epsilon = 1e-10);
        assert_abs_diff_eq!(pf, pt, epsilon = 1e-12);
    }

    #[test]
    fn f_zero_for_zero_coefficients() {
        let fit = two_group_fit(&[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let (f, p) = moderated_f(&fit, &[0, 1], 1.0, 4.0).unwrap();
        assert_abs_diff_eq!(f, 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bh_hand_example() {
        let adj = bh_adjust(&[0.01, 0.02, 0.03]);
        for v in &adj {
            assert_abs_diff_eq!(*v, 0.03, epsilon = 1e-12);
        }
        let ones = bh_adjust(&[1.0, 1.0, 1.0]);
        assert!(ones.iter().all(|&v| v == 1.0));
        let single = bh_adjust(&[0.2]);
        assert_abs_diff_eq!(single[0], 0.2, epsilon = 0.0);
    }

    #[test]
    fn bh_monotone_and_dominates_p() {
        let p = [0.001, 0.5, 0.03, 0.02, 0.9, 0.04, f64::NAN];
        let adj = bh_adjust(&p);
        for i in 0..6 {
            assert!(adj[i] >= p[i]);
            assert!(adj[i] <= 1.0);
        }
        assert!(adj[6].is_nan());
        // monotone in p
        let mut pairs: Vec<(f64, f64)> = (0..6).map(|i| (p[i], adj[i])).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn bh_invariant_under_permutation() {
        let p = [0.04, 0.001, 0.87, 0.02, 0.31];
        let adj = bh_adjust(&p);
        let perm = [2usize, 0, 4, 1, 3];
        let p2: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let adj2 = bh_adjust(&p2);
        for (k, &i) in perm.iter().enumerate() {
            assert_abs_diff_eq!(adj2[k], adj[i], epsilon = 0.0);
        }
    }

    #[test]
    fn top_table_sorting_and_cutoff() {
        let x = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ];
        let design = DesignMatrix::new(x, vec!["g1".into(), "g2".into()]).unwrap();
        let rows_y: Vec<[f64; 6]> = vec![
            [1.0, 2.0, 3.0, 10.0, 11.0, 12.0],
            [1.0, 2.0, 3.0, 1.2, 2.2, 3.2],
            [0.9, 2.1, 3.0, 9.8, 11.2, 12.1],
        ];
        let fits: Vec<GeneFit> = rows_y
            .iter()
            .map(|y| fit_gene(y, &design, None).unwrap())
            .collect();
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let eb = eb_moderate(&fits, 1, &HyperpriorOptions::default(), false).unwrap();
        let rows = top_table(&ids, &fits, &eb, None);
        assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            assert!(
                w[0].p_value <= w[1].p_value
                    || (w[0].p_value == w[1].p_value && w[0].gene_id <= w[1].gene_id)
            );
            assert!(w[0].fdr >= w[0].p_value);
        }
        // empty after an impossible cutoff is fine
        let none = top_table(&ids, &fits, &eb, Some(0.0));
        assert!(none.is_empty());
    }

    #[test]
    fn equal_p_values_tie_break_by_gene_id() {
        let rows = vec![
            TopTableRow {
                gene_id: "z".into(),
                log_fc: 1.0,
                avg_expr: 0.0,
                t: 1.0,
                p_value: 0.5,
                fdr: 0.5,
                df_total: 8.0,
                df_prior: 4.0,
                s2_post: 1.0,
            },
            TopTableRow {
                gene_id: "a".into(),
                log_fc: 1.0,
                avg_expr: 0.0,
                t: 1.0,
                p_value: 0.5,
                fdr: 0.5,
                df_total: 8.0,
                df_prior: 4.0,
                s2_post: 1.0,
            },
        ];
        let mut sorted = rows;
        sorted
            .sort_by(|a, b| nan_last(a.p_value, b.p_value).then_with(|| a.gene_id.cmp(&b.gene_id)));
        assert_eq!(sorted[0].gene_id, "a");
    }
}
