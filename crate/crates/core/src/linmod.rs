//! Genewise weighted least-squares fits.
//!
//! Each gene is fit independently against the shared design matrix after
//! dropping missing observations and zero-weight observations. The solver is
//! a Householder QR of sqrt(W)X, which stays accurate for near-collinear
//! designs; a gene whose reduced design loses column rank is flagged
//! unusable and carries no statistics.

use ndarray::Array2;
use rayon::prelude::*;
use std::collections::HashSet;

use crate::error::{Error, Result};

/// G x n matrix of log2-expression values with optional positive precision
/// weights. Missing values are encoded as NaN.
#[derive(Debug, Clone)]
pub struct ExpressionSet {
    values: Array2<f64>,
    weights: Option<Array2<f64>>,
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
}

impl ExpressionSet {
    pub fn new(
        values: Array2<f64>,
        weights: Option<Array2<f64>>,
        gene_ids: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let (g, n) = values.dim();
        if g < 2 || n < 2 {
            return Err(Error::InvalidData(format!(
                "expression matrix must be at least 2 x 2, got {g} x {n}"
            )));
        }
        if gene_ids.len() != g {
            return Err(Error::Dimension(format!(
                "{} gene ids for {g} rows",
                gene_ids.len()
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} sample ids for {n} columns",
                sample_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &gene_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate gene id {id:?}")));
            }
        }
        let mut seen = HashSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate sample id {id:?}")));
            }
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidData(
                "expression values must be finite or NaN (missing)".into(),
            ));
        }
        if let Some(w) = &weights {
            if w.dim() != values.dim() {
                return Err(Error::Dimension(format!(
                    "weights shape {:?} does not match expression shape {:?}",
                    w.dim(),
                    values.dim()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0) || x.is_infinite()) {
                return Err(Error::InvalidData(
                    "weights must be finite and non-negative".into(),
                ));
            }
        }
        Ok(ExpressionSet {
            values,
            weights,
            gene_ids,
            sample_ids,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn weights(&self) -> Option<&Array2<f64>> {
        self.weights.as_ref()
    }
}

/// n x p design matrix of full column rank.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: Array2<f64>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(x: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        let (n, p) = x.dim();
        if p == 0 || n < p {
            return Err(Error::InvalidData(format!(
                "design matrix must have 1 <= p <= n, got n = {n}, p = {p}"
            )));
        }
        if column_names.len() != p {
            return Err(Error::Dimension(format!(
                "{} column names for {p} columns",
                column_names.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(
                "design matrix entries must be finite".into(),
            ));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        if qr_least_squares(&rows, &vec![0.0; n]).is_none() {
            return Err(Error::InvalidData(
                "design matrix is not of full column rank".into(),
            ));
        }
        Ok(DesignMatrix { x, column_names })
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_coefficients(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.x
    }

    /// Resolve a coefficient given by name or 1-based index.
    pub fn resolve_coefficient(&self, spec: &str) -> Result<usize> {
        if let Some(j) = self.column_names.iter().position(|c| c == spec) {
            return Ok(j);
        }
        if let Ok(idx) = spec.parse::<usize>() {
            if idx >= 1 && idx <= self.column_names.len() {
                return Ok(idx - 1);
            }
        }
        Err(Error::InvalidData(format!(
            "unknown coefficient {spec:?}; available: {:?}",
            self.column_names
        )))
    }
}

/// Per-gene least-squares summary.
#[derive(Debug, Clone)]
pub struct GeneFit {
    /// Coefficient estimates; None when the reduced design lost rank or had
    /// fewer usable observations than coefficients.
    pub beta: Option<Vec<f64>>,
    /// sqrt of the diagonal of (X'WX)^-1, parallel to beta.
    pub unscaled_sd: Option<Vec<f64>>,
    /// Full (X'WX)^-1, row-major p x p.
    pub cov_unscaled: Option<Vec<f64>>,
    /// Residual variance; None when df_residual = 0 or the fit is unusable.
    pub s2: Option<f64>,
    /// Residual degrees of freedom (observations used minus p; 0 for
    /// unusable fits).
    pub df_residual: f64,
    /// Mean of the non-missing expression values; None if all missing.
    pub avg_expr: Option<f64>,
}

impl GeneFit {
    /// Usable for hyperparameter estimation: has a variance on positive df.
    pub fn usable(&self) -> bool {
        self.s2.is_some() && self.df_residual > 0.0
    }
}

/// Weighted least-squares fit of one gene. Observations with missing
/// (NaN) response or zero weight are dropped.
pub fn fit_gene(y: &[f64], design: &DesignMatrix, weights: Option<&[f64]>) -> Result<GeneFit> {
    let n = design.n_samples();
    let p = design.n_coefficients();
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "response length {} does not match design rows {n}",
            y.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "weights length {} does not match design rows {n}",
                w.len()
            )));
        }
    }

    let mut avg_sum = 0.0;
    let mut avg_n = 0usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for i in 0..n {
        let yi = y[i];
        if yi.is_nan() {
            continue;
        }
        avg_sum += yi;
        avg_n += 1;
        let wi = weights.map_or(1.0, |w| w[i]);
        if wi <= 0.0 {
            continue;
        }
        let sw = wi.sqrt();
        rows.push(design.matrix().row(i).iter().map(|&x| sw * x).collect());
        b.push(sw * yi);
    }
    let avg_expr = if avg_n > 0 {
        Some(avg_sum / avg_n as f64)
    } else {
        None
    };
    let n_used = rows.len();

    let unusable = GeneFit {
        beta: None,
        unscaled_sd: None,
        cov_unscaled: None,
        s2: None,
        df_residual: 0.0,
        avg_expr,
    };
    if n_used < p {
        return Ok(unusable);
    }
    let Some(solved) = qr_least_squares(&rows, &b) else {
        return Ok(unusable);
    };

    let df = (n_used - p) as f64;
    let s2 = if df > 0.0 {
        Some(solved.rss / df)
    } else {
        None
    };
    let unscaled_sd = (0..p)
        .map(|j| solved.cov_unscaled[j * p + j].max(0.0).sqrt())
        .collect();
    Ok(GeneFit {
        beta: Some(solved.beta),
        unscaled_sd: Some(unscaled_sd),
        cov_unscaled: Some(solved.cov_unscaled),
        s2,
        df_residual: df,
        avg_expr,
    })
}

/// Fit every gene; order preserved; results are bit-identical to a serial
/// loop because each gene's computation is independent.
pub fn fit_all(data: &ExpressionSet, design: &DesignMatrix) -> Result<Vec<GeneFit>> {
    if data.n_samples() != design.n_samples() {
        return Err(Error::Dimension(format!(
            "expression has {} samples but design has {} rows",
            data.n_samples(),
            design.n_samples()
        )));
    }
    (0..data.n_genes())
        .into_par_iter()
        .map(|g| {
            let y = data.values().row(g).to_vec();
            let w = data.weights().map(|w| w.row(g).to_vec());
            fit_gene(&y, design, w.as_deref())
        })
        .collect()
}

struct LeastSquares {
    beta: Vec<f64>,
    cov_unscaled: Vec<f64>,
    rss: f64,
}

/// Householder QR least squares on an m x p system (m >= p). Returns None
/// when the matrix is rank deficient.
fn qr_least_squares(a_rows: &[Vec<f64>], b: &[f64]) -> Option<LeastSquares> {
    let m = a_rows.len();
    if m == 0 {
        return None;
    }
    let p = a_rows[0].len();
    if m < p {
        return None;
    }
    let mut a: Vec<f64> = Vec::with_capacity(m * p);
    for row in a_rows {
        a.extend_from_slice(row);
    }
    let mut qtb = b.to_vec();
    let mut rdiag = vec![0.0_f64; p];

    let col_norm_max = (0..p)
        .map(|j| (0..m).map(|i| a[i * p + j].abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    if col_norm_max == 0.0 {
        return None;
    }
    let tol = col_norm_max * 1e-12 * (m as f64).sqrt();

    for j in 0..p {
        // Householder reflection for column j
        let mut norm = 0.0;
        for i in j..m {
            norm += a[i * p + j] * a[i * p + j];
        }
        let norm = norm.sqrt();
        if norm <= tol {
            return None; // rank deficient
        }
        let alpha = if a[j * p + j] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0_f64; m - j];
        v[0] = a[j * p + j] - alpha;
        for i in (j + 1)..m {
            v[i - j] = a[i * p + j];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        rdiag[j] = alpha;
        a[j * p + j] = alpha;
        for i in (j + 1)..m {
            a[i * p + j] = 0.0;
        }
        if vtv > 0.0 {
            for k in (j + 1)..p {
                let dot: f64 = (j..m).map(|i| v[i - j] * a[i * p + k]).sum();
                let f = 2.0 * dot / vtv;
                for i in j..m {
                    a[i * p + k] -= f * v[i - j];
                }
            }
            let dot: f64 = (j..m).map(|i| v[i - j] * qtb[i]).sum();
            let f = 2.0 * dot / vtv;
            for i in j..m {
                qtb[i] -= f * v[i - j];
            }
        }
    }

    // back-substitute R beta = Q'b
    let mut beta = vec![0.0_f64; p];
    for j in (0..p).rev() {
        let mut acc = qtb[j];
        for k in (j + 1)..p {
            acc -= a[j * p + k] * beta[k];
        }
        beta[j] = acc / rdiag[j];
    }
    let rss: f64 = qtb[p..].iter().map(|x| x * x).sum();

    // R^-1 (upper triangular), then (X'WX)^-1 = R^-1 R^-T
    let mut rinv = vec![0.0_f64; p * p];
    for j in (0..p).rev() {
        rinv[j * p + j] = 1.0 / rdiag[j];
        for i in (0..j).rev() {
            let mut acc = 0.0;
            for k in (i + 1)..=j {
                acc += a[i * p + k] * rinv[k * p + j];
            }
            rinv[i * p + j] = -acc / rdiag[i];
        }
    }
    let mut cov = vec![0.0_f64; p * p];
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in i.max(j)..p {
                acc += rinv[i * p + k] * rinv[j * p + k];
            }
            cov[i * p + j] = acc;
        }
    }

    Some(LeastSquares {
        beta,
        cov_unscaled: cov,
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_group_design() -> DesignMatrix {
        // group-means coding: three samples per group
        let x = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ];
        DesignMatrix::new(x, vec!["group1".into(), "group2".into()]).unwrap()
    }

    #[test]
    fn hand_computed_two_group_fit() {
        let design = two_group_design();
        let y = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let fit = fit_gene(&y, &design, None).unwrap();
        let beta = fit.beta.as_ref().unwrap();
        assert_abs_diff_eq!(beta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta[1], 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta[1] - beta[0], 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.s2.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.df_residual, 4.0, epsilon = 0.0);
        assert_abs_diff_eq!(fit.avg_expr.unwrap(), 6.5, epsilon = 1e-12);
    }

    #[test]
    fn missing_value_reduces_df() {
        let design = two_group_design();
        let y = [1.0, 2.0, 3.0, 10.0, 11.0, f64::NAN];
        let fit = fit_gene(&y, &design, None).unwrap();
        let beta = fit.beta.as_ref().unwrap();
        assert_abs_diff_eq!(beta[1], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.df_residual, 3.0, epsilon = 0.0);
    }

    #[test]
    fn constant_gene_under_intercept_model() {
        let x = Array2::from_elem((4, 1), 1.0);
        let design = DesignMatrix::new(x, vec!["intercept".into()]).unwrap();
        let y = [5.5, 5.5, 5.5, 5.5];
        let fit = fit_gene(&y, &design, None).unwrap();
        assert_abs_diff_eq!(fit.beta.unwrap()[0], 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.s2.unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_weights_drop_observations() {
        let design = two_group_design();
        let y = [1.0, 2.0, 3.0, 10.0, 11.0, 99.0];
        let w = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let fit = fit_gene(&y, &design, Some(&w)).unwrap();
        assert_abs_diff_eq!(fit.beta.unwrap()[1], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.df_residual, 3.0, epsilon = 0.0);
        // dropped value still counts toward the average expression
        assert_abs_diff_eq!(fit.avg_expr.unwrap(), 126.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_reduced_design_is_unusable() {
        let design = two_group_design();
        // all of group 2 missing: the group2 column is zero on used rows
        let y = [1.0, 2.0, 3.0, f64::NAN, f64::NAN, f64::NAN];
        let fit = fit_gene(&y, &design, None).unwrap();
        assert!(fit.beta.is_none());
        assert!(fit.s2.is_none());
        assert!(!fit.usable());
        assert_abs_diff_eq!(fit.df_residual, 0.0, epsilon = 0.0);
    }

    #[test]
    fn saturated_fit_has_absent_s2_not_zero() {
        let design = two_group_design();
        let y = [1.0, f64::NAN, f64::NAN, 10.0, f64::NAN, f64::NAN];
        let fit = fit_gene(&y, &design, None).unwrap();
        assert!(fit.beta.is_some());
        assert!(fit.s2.is_none());
        assert_abs_diff_eq!(fit.df_residual, 0.0, epsilon = 0.0);
    }

    #[test]
    fn weighted_residuals_orthogonal_to_design() {
        let x = array![
            [1.0, 0.3, 2.0],
            [1.0, -0.7, 1.0],
            [1.0, 1.9, 0.5],
            [1.0, 0.2, -1.0],
            [1.0, -1.1, 0.8],
            [1.0, 0.5, 1.5],
            [1.0, 2.2, -0.3]
        ];
        let design =
            DesignMatrix::new(x.clone(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let y = [2.0, 1.0, 4.5, 0.3, -1.2, 3.3, 5.1];
        let w = [1.0, 0.5, 2.0, 1.5, 0.8, 1.2, 0.9];
        let fit = fit_gene(&y, &design, Some(&w)).unwrap();
        let beta = fit.beta.unwrap();
        for j in 0..3 {
            let mut dot = 0.0;
            for i in 0..7 {
                let fitted: f64 = (0..3).map(|k| x[[i, k]] * beta[k]).sum();
                dot += x[[i, j]] * w[i] * (y[i] - fitted);
            }
            assert_abs_diff_eq!(dot, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn weight_rescaling_leaves_beta_and_t_denominator_invariant() {
        let design = two_group_design();
        let y = [1.0, 2.5, 3.0, 9.0, 11.0, 12.5];
        let w1 = [1.0, 2.0, 0.5, 1.0, 1.5, 1.0];
        let c = 7.3;
        let w2: Vec<f64> = w1.iter().map(|&w| c * w).collect();
        let f1 = fit_gene(&y, &design, Some(&w1)).unwrap();
        let f2 = fit_gene(&y, &design, Some(&w2)).unwrap();
        let (b1, b2) = (f1.beta.unwrap(), f2.beta.unwrap());
        for j in 0..2 {
            assert_abs_diff_eq!(b1[j], b2[j], epsilon = 1e-10);
        }
        // s2 scales by c, unscaled_sd by 1/sqrt(c); the t denominator
        // sqrt(s2) * sd is invariant
        let d1 = f1.s2.unwrap().sqrt() * f1.unscaled_sd.as_ref().unwrap()[1];
        let d2 = f2.s2.unwrap().sqrt() * f2.unscaled_sd.as_ref().unwrap()[1];
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-10);
    }

    #[test]
    fn fit_all_matches_per_gene_calls() {
        let design = two_group_design();
        let values = array![
            [1.0, 2.0, 3.0, 10.0, 11.0, 12.0],
            [0.5, 0.1, 0.9, 0.2, 0.7, 0.4]
        ];
        let data = ExpressionSet::new(
            values.clone(),
            None,
            vec!["g1".into(), "g2".into()],
            (0..6).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let fits = fit_all(&data, &design).unwrap();
        assert_eq!(fits.len(), 2);
        for (g, fit) in fits.iter().enumerate() {
            let single = fit_gene(&values.row(g).to_vec(), &design, None).unwrap();
            assert_eq!(fit.beta, single.beta);
            assert_eq!(fit.s2, single.s2);
        }
    }

    #[test]
    fn all_missing_gene_flagged_unusable() {
        let design = two_group_design();
        let y = [f64::NAN; 6];
        let fit = fit_gene(&y, &design, None).unwrap();
        assert!(!fit.usable());
        assert!(fit.avg_expr.is_none());
    }

    #[test]
    fn design_must_be_full_rank() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        assert!(DesignMatrix::new(x, vec!["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn expression_set_validation() {
        let vals = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(ExpressionSet::new(
            vals.clone(),
            None,
            vec!["g".into(), "g".into()],
            vec!["a".into(), "b".into()]
        )
        .is_err());
        assert!(ExpressionSet::new(
            vals,
            Some(array![[1.0, -1.0], [1.0, 1.0]]),
            vec!["g1".into(), "g2".into()],
            vec!["a".into(), "b".into()]
        )
        .is_err());
    }

    #[test]
    fn coefficient_resolution() {
        let design = two_group_design();
        assert_eq!(design.resolve_coefficient("group2").unwrap(), 1);
        assert_eq!(design.resolve_coefficient("1").unwrap(), 0);
        assert!(design.resolve_coefficient("nope").is_err());
        assert!(design.resolve_coefficient("3").is_err());
    }
}
