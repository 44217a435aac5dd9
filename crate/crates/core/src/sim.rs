//! Simulation harness: generates expression data from the hierarchical
//! variance model (optionally with hypervariable and differentially
//! expressed genes) and scores type-I error, power, false discoveries and
//! hyperparameter recovery for the standard and robust pipelines.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hyperprior::HyperpriorOptions;
use crate::linmod::{fit_all, DesignMatrix, ExpressionSet};
use crate::modstats::{bh_adjust, eb_moderate, EbFit};

/// Configuration of one simulated dataset.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_genes: usize,
    /// Samples are split into two groups of n/2 and n - n/2.
    pub n_samples: usize,
    /// True prior degrees of freedom; may be infinite.
    pub d0_true: f64,
    pub s02_true: f64,
    /// Count of hypervariable genes, drawn with prior df `d0_outlier_true`.
    pub n_outliers: usize,
    pub d0_outlier_true: f64,
    /// Count of differentially expressed genes.
    pub n_de: usize,
    /// Standard deviation of the true log-fold-changes.
    pub lfc_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_genes: 10_000,
            n_samples: 6,
            d0_true: 4.0,
            s02_true: 0.04,
            n_outliers: 0,
            d0_outlier_true: 0.5,
            n_de: 0,
            lfc_sd: 2.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_genes < 2 {
            return Err(Error::InvalidData("need at least 2 genes".into()));
        }
        if self.n_samples < 3 {
            return Err(Error::InvalidData(
                "need at least 3 samples for a two-group design with residual df".into(),
            ));
        }
        if self.n_outliers + self.n_de > self.n_genes {
            return Err(Error::InvalidData(format!(
                "outliers ({}) + DE ({}) exceed gene count ({}); the sets must be disjoint",
                self.n_outliers, self.n_de, self.n_genes
            )));
        }
        if !(self.d0_true > 0.0) || !(self.s02_true > 0.0) || !(self.d0_outlier_true > 0.0) {
            return Err(Error::InvalidData(
                "d0_true, s02_true and d0_outlier_true must be positive".into(),
            ));
        }
        if !(self.lfc_sd >= 0.0) {
            return Err(Error::InvalidData("lfc_sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of a simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub sigma2: Vec<f64>,
    pub de: Vec<bool>,
    pub outlier: Vec<bool>,
    pub lfc: Vec<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Generate one dataset. Fully determined by the seed: each gene draws from
/// its own substream (seed mixed with the gene index by splitmix64), so
/// generation parallelizes without changing the output.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(ExpressionSet, DesignMatrix, SimTruth)> {
    cfg.validate()?;
    let g = cfg.n_genes;
    let n = cfg.n_samples;
    let n1 = n / 2;

    // DE genes occupy [0, n_de); hypervariable genes [n_de, n_de+n_outliers)
    let de: Vec<bool> = (0..g).map(|i| i < cfg.n_de).collect();
    let outlier: Vec<bool> = (0..g)
        .map(|i| i >= cfg.n_de && i < cfg.n_de + cfg.n_outliers)
        .collect();

    let rows: Vec<(Vec<f64>, f64, f64)> = (0..g)
        .into_par_iter()
        .map(|gene| {
            let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(
                cfg.seed ^ (gene as u64).wrapping_mul(0xA0761D6478BD642F),
            ));
            let prior_df = if outlier[gene] {
                cfg.d0_outlier_true
            } else {
                cfg.d0_true
            };
            let sigma2 = if prior_df.is_finite() {
                let chi: f64 = ChiSquared::new(prior_df)
                    .expect("positive df")
                    .sample(&mut rng);
                cfg.s02_true * prior_df / chi
            } else {
                cfg.s02_true
            };
            let lfc = if de[gene] {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.lfc_sd * z
            } else {
                0.0
            };
            let sd = sigma2.sqrt();
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let shift = if i >= n1 { lfc } else { 0.0 };
                    shift + sd * noise
                })
                .collect();
            (y, sigma2, lfc)
        })
        .collect();

    let mut values = Array2::zeros((g, n));
    let mut sigma2 = Vec::with_capacity(g);
    let mut lfc = Vec::with_capacity(g);
    for (gene, (y, s, l)) in rows.into_iter().enumerate() {
        for (i, v) in y.into_iter().enumerate() {
            values[[gene, i]] = v;
        }
        sigma2.push(s);
        lfc.push(l);
    }

    let gene_ids: Vec<String> = (0..g).map(|i| format!("gene{:06}", i + 1)).collect();
    let sample_ids: Vec<String> = (0..n)
        .map(|i| {
            if i < n1 {
                format!("group1_{}", i + 1)
            } else {
                format!("group2_{}", i - n1 + 1)
            }
        })
        .collect();
    let data = ExpressionSet::new(values, None, gene_ids, sample_ids)?;

    let mut x = Array2::zeros((n, 2));
    for i in 0..n {
        x[[i, 0]] = 1.0;
        x[[i, 1]] = if i >= n1 { 1.0 } else { 0.0 };
    }
    let design = DesignMatrix::new(x, vec!["intercept".into(), "group2".into()])?;

    Ok((
        data,
        design,
        SimTruth {
            sigma2,
            de,
            outlier,
            lfc,
        },
    ))
}

/// Column index of the group-difference coefficient in simulated designs.
pub const SIM_COEFFICIENT: usize = 1;

fn rep_config(cfg: &SimConfig, rep: usize) -> SimConfig {
    let mut c = cfg.clone();
    c.seed = splitmix64(
        cfg.seed
            .wrapping_add((rep as u64).wrapping_mul(0x9E3779B97F4A7C15)),
    );
    c
}

/// Moderated p-values from both pipelines for one simulated dataset.
fn run_both_pipelines(cfg: &SimConfig) -> Result<(EbFit, EbFit)> {
    let (data, design, _) = simulate_dataset(cfg)?;
    let fits = fit_all(&data, &design)?;
    let standard = eb_moderate(&fits, SIM_COEFFICIENT, &HyperpriorOptions::default(), false)?;
    let robust_opts = HyperpriorOptions {
        robust: true,
        ..Default::default()
    };
    let robust = eb_moderate(&fits, SIM_COEFFICIENT, &robust_opts, false)?;
    Ok((standard, robust))
}

/// Mean genewise rejection rates at the given p-value cutoffs over null
/// replications, for the standard and robust tests.
#[derive(Debug, Clone)]
pub struct Type1Result {
    pub cutoffs: Vec<f64>,
    pub standard: Vec<f64>,
    pub robust: Vec<f64>,
    pub n_reps: usize,
}

pub fn evaluate_type1(cfg: &SimConfig, n_reps: usize, cutoffs: &[f64]) -> Result<Type1Result> {
    if cfg.n_de != 0 || cfg.n_outliers != 0 {
        return Err(Error::InvalidData(
            "type-I evaluation requires a null configuration (no DE, no outliers)".into(),
        ));
    }
    if n_reps == 0 {
        return Err(Error::InvalidData("n_reps must be positive".into()));
    }
    let per_rep: Vec<(Vec<f64>, Vec<f64>)> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let (standard, robust) = run_both_pipelines(&rep_config(cfg, rep))?;
            let rate = |p: &[f64], c: f64| {
                let valid: Vec<&f64> = p.iter().filter(|v| v.is_finite()).collect();
                valid.iter().filter(|&&&v| v <= c).count() as f64 / valid.len() as f64
            };
            let s: Vec<f64> = cutoffs.iter().map(|&c| rate(&standard.p, c)).collect();
            let r: Vec<f64> = cutoffs.iter().map(|&c| rate(&robust.p, c)).collect();
            Ok((s, r))
        })
        .collect::<Result<_>>()?;

    // ordered reduction over replication index keeps the result independent
    // of thread scheduling
    let mut standard = vec![0.0; cutoffs.len()];
    let mut robust = vec![0.0; cutoffs.len()];
    for (s, r) in &per_rep {
        for k in 0..cutoffs.len() {
            standard[k] += s[k];
            robust[k] += r[k];
        }
    }
    for k in 0..cutoffs.len() {
        standard[k] /= n_reps as f64;
        robust[k] /= n_reps as f64;
    }
    Ok(Type1Result {
        cutoffs: cutoffs.to_vec(),
        standard,
        robust,
        n_reps,
    })
}

/// Power and false-discovery summaries over replications with DE genes.
#[derive(Debug, Clone)]
pub struct PowerFdrResult {
    pub fdr_cutoffs: Vec<f64>,
    pub power_standard: Vec<f64>,
    pub power_robust: Vec<f64>,
    /// Monte-Carlo standard errors of the mean power curves.
    pub power_standard_se: Vec<f64>,
    pub power_robust_se: Vec<f64>,
    /// Standard error of the paired per-replication difference
    /// (robust - standard) of power at each cutoff.
    pub power_diff_se: Vec<f64>,
    /// Mean false discoveries among the top 500 genes ranked by p-value.
    pub fd_top_standard: f64,
    pub fd_top_robust: f64,
    pub fd_standard_se: f64,
    pub fd_robust_se: f64,
    pub fd_diff_se: f64,
    pub top_rank: usize,
    pub n_reps: usize,
}

pub const DEFAULT_FDR_CUTOFFS: [f64; 10] =
    [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10];

/// Number of false discoveries among the `top` smallest p-values.
fn false_discoveries_in_top(p: &[f64], de: &[bool], top: usize) -> f64 {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        p[a].partial_cmp(&p[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .iter()
        .take(top.min(p.len()))
        .filter(|&&g| !de[g])
        .count() as f64
}

pub fn evaluate_power_fdr(cfg: &SimConfig, n_reps: usize) -> Result<PowerFdrResult> {
    if cfg.n_de == 0 {
        return Err(Error::InvalidData(
            "power evaluation requires DE genes in the configuration".into(),
        ));
    }
    if n_reps == 0 {
        return Err(Error::InvalidData("n_reps must be positive".into()));
    }
    let cutoffs = DEFAULT_FDR_CUTOFFS.to_vec();
    let top = 500usize;

    struct Rep {
        power_s: Vec<f64>,
        power_r: Vec<f64>,
        fd_s: f64,
        fd_r: f64,
    }

    let per_rep: Vec<Rep> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rc = rep_config(cfg, rep);
            let (data, design, truth) = simulate_dataset(&rc)?;
            let fits = fit_all(&data, &design)?;
            let standard =
                eb_moderate(&fits, SIM_COEFFICIENT, &HyperpriorOptions::default(), false)?;
            let robust = eb_moderate(
                &fits,
                SIM_COEFFICIENT,
                &HyperpriorOptions {
                    robust: true,
                    ..Default::default()
                },
                false,
            )?;
            let n_de = truth.de.iter().filter(|&&d| d).count() as f64;
            let power_at = |p: &[f64]| -> Vec<f64> {
                let fdr = bh_adjust(p);
                cutoffs
                    .iter()
                    .map(|&c| {
                        truth
                            .de
                            .iter()
                            .zip(&fdr)
                            .filter(|(&d, &q)| d && q.is_finite() && q <= c)
                            .count() as f64
                            / n_de
                    })
                    .collect()
            };
            Ok(Rep {
                power_s: power_at(&standard.p),
                power_r: power_at(&robust.p),
                fd_s: false_discoveries_in_top(&standard.p, &truth.de, top),
                fd_r: false_discoveries_in_top(&robust.p, &truth.de, top),
            })
        })
        .collect::<Result<_>>()?;

    let nf = n_reps as f64;
    let mut power_standard = vec![0.0; cutoffs.len()];
    let mut power_robust = vec![0.0; cutoffs.len()];
    for rep in &per_rep {
        for k in 0..cutoffs.len() {
            power_standard[k] += rep.power_s[k];
            power_robust[k] += rep.power_r[k];
        }
    }
    for k in 0..cutoffs.len() {
        power_standard[k] /= nf;
        power_robust[k] /= nf;
    }
    let se_at = |extract: &dyn Fn(&Rep, usize) -> f64, k: usize| {
        let vals: Vec<f64> = per_rep.iter().map(|r| extract(r, k)).collect();
        se_of_mean(&vals)
    };
    let power_standard_se: Vec<f64> = (0..cutoffs.len())
        .map(|k| se_at(&|r, k| r.power_s[k], k))
        .collect();
    let power_robust_se: Vec<f64> = (0..cutoffs.len())
        .map(|k| se_at(&|r, k| r.power_r[k], k))
        .collect();
    let power_diff_se: Vec<f64> = (0..cutoffs.len())
        .map(|k| se_at(&|r, k| r.power_r[k] - r.power_s[k], k))
        .collect();
    let fd_top_standard = per_rep.iter().map(|r| r.fd_s).sum::<f64>() / nf;
    let fd_top_robust = per_rep.iter().map(|r| r.fd_r).sum::<f64>() / nf;
    let fd_s: Vec<f64> = per_rep.iter().map(|r| r.fd_s).collect();
    let fd_r: Vec<f64> = per_rep.iter().map(|r| r.fd_r).collect();
    let fd_diffs: Vec<f64> = per_rep.iter().map(|r| r.fd_r - r.fd_s).collect();

    Ok(PowerFdrResult {
        fdr_cutoffs: cutoffs,
        power_standard,
        power_robust,
        power_standard_se,
        power_robust_se,
        power_diff_se,
        fd_top_standard,
        fd_top_robust,
        fd_standard_se: se_of_mean(&fd_s),
        fd_robust_se: se_of_mean(&fd_r),
        fd_diff_se: se_of_mean(&fd_diffs),
        top_rank: top,
        n_reps,
    })
}

fn se_of_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Five-number summary; infinite estimates sort to the top end.
#[derive(Debug, Clone, Copy)]
pub struct SummaryStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn from_samples(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| -> f64 {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            if lo + 1 >= v.len() {
                v[v.len() - 1]
            } else if v[lo].is_infinite() || v[lo + 1].is_infinite() {
                // interpolation with an infinite order statistic
                if frac == 0.0 {
                    v[lo]
                } else {
                    v[lo + 1]
                }
            } else {
                v[lo] * (1.0 - frac) + v[lo + 1] * frac
            }
        };
        SummaryStats {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

/// Distribution of the hyperparameter estimates across replications.
#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub d0_standard: SummaryStats,
    pub d0_robust: SummaryStats,
    pub s02_standard: SummaryStats,
    pub s02_robust: SummaryStats,
    /// Replications where the robust d0 estimate is strictly closer to the
    /// simulation truth than the standard one.
    pub robust_closer_d0: usize,
    pub n_reps: usize,
}

pub fn evaluate_hyperparam_recovery(cfg: &SimConfig, n_reps: usize) -> Result<RecoveryResult> {
    if n_reps == 0 {
        return Err(Error::InvalidData("n_reps must be positive".into()));
    }
    let per_rep: Vec<(f64, f64, f64, f64)> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let (standard, robust) = run_both_pipelines(&rep_config(cfg, rep))?;
            Ok((
                standard.hyperprior.d0,
                robust.hyperprior.d0,
                standard.hyperprior.s02[0],
                robust.hyperprior.s02[0],
            ))
        })
        .collect::<Result<_>>()?;

    let d0_s: Vec<f64> = per_rep.iter().map(|r| r.0).collect();
    let d0_r: Vec<f64> = per_rep.iter().map(|r| r.1).collect();
    let s02_s: Vec<f64> = per_rep.iter().map(|r| r.2).collect();
    let s02_r: Vec<f64> = per_rep.iter().map(|r| r.3).collect();
    let closer = per_rep
        .iter()
        .filter(|r| {
            let err_r = (r.1 - cfg.d0_true).abs();
            let err_s = (r.0 - cfg.d0_true).abs();
            err_r < err_s
        })
        .count();

    Ok(RecoveryResult {
        d0_standard: SummaryStats::from_samples(&d0_s),
        d0_robust: SummaryStats::from_samples(&d0_r),
        s02_standard: SummaryStats::from_samples(&s02_s),
        s02_robust: SummaryStats::from_samples(&s02_r),
        robust_closer_d0: closer,
        n_reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::trigamma;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> SimConfig {
        SimConfig {
            n_genes: 2_000,
            seed: 99,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_datasets() {
        let cfg = small_cfg();
        let (a, _, ta) = simulate_dataset(&cfg).unwrap();
        let (b, _, tb) = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(ta.sigma2, tb.sigma2);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 100;
        let (c, _, _) = simulate_dataset(&cfg2).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn infinite_d0_gives_constant_variances() {
        let cfg = SimConfig {
            n_genes: 50,
            d0_true: f64::INFINITY,
            seed: 3,
            ..Default::default()
        };
        let (_, _, truth) = simulate_dataset(&cfg).unwrap();
        for &v in &truth.sigma2 {
            assert_abs_diff_eq!(v, cfg.s02_true, epsilon = 0.0);
        }
    }

    #[test]
    fn log_variance_ratio_centered_at_zero_when_dg_equals_d0() {
        // E log(s2/s02) = psi(2) - psi(2) + log(4/4) = 0 for d_g = d0 = 4
        let cfg = SimConfig {
            seed: 7,
            ..Default::default()
        };
        let (data, design, _) = simulate_dataset(&cfg).unwrap();
        let fits = fit_all(&data, &design).unwrap();
        let mean: f64 = fits
            .iter()
            .map(|f| (f.s2.unwrap() / cfg.s02_true).ln())
            .sum::<f64>()
            / fits.len() as f64;
        // sd of the mean is sqrt(2 trigamma(2) / G) ~ 0.0114
        assert!(mean.abs() < 0.04, "mean log ratio {mean}");
    }

    #[test]
    fn prior_draw_log_variance_matches_trigamma() {
        let cfg = SimConfig {
            n_genes: 40_000,
            d0_true: 4.0,
            seed: 21,
            ..Default::default()
        };
        let (_, _, truth) = simulate_dataset(&cfg).unwrap();
        let logs: Vec<f64> = truth.sigma2.iter().map(|v| v.ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var =
            logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (logs.len() - 1) as f64;
        let expected = trigamma(2.0).unwrap();
        // MC se of the variance is about expected * sqrt((kurt-1)/n) ~ 0.01
        assert!(
            (var - expected).abs() < 0.04,
            "var = {var}, expected = {expected}"
        );
    }

    #[test]
    fn outliers_inflate_log_variance_spread_on_matched_seeds() {
        let clean_cfg = SimConfig {
            n_genes: 4_000,
            seed: 11,
            ..Default::default()
        };
        let mut dirty_cfg = clean_cfg.clone();
        dirty_cfg.n_outliers = 100;
        let zvar = |cfg: &SimConfig| {
            let (data, design, _) = simulate_dataset(cfg).unwrap();
            let fits = fit_all(&data, &design).unwrap();
            let z: Vec<f64> = fits.iter().map(|f| f.s2.unwrap().ln()).collect();
            let m = z.iter().sum::<f64>() / z.len() as f64;
            z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (z.len() - 1) as f64
        };
        assert!(zvar(&dirty_cfg) > zvar(&clean_cfg));
    }

    #[test]
    fn de_and_outlier_sets_are_disjoint() {
        let cfg = SimConfig {
            n_genes: 100,
            n_de: 30,
            n_outliers: 20,
            seed: 5,
            ..Default::default()
        };
        let (_, _, truth) = simulate_dataset(&cfg).unwrap();
        assert_eq!(truth.de.iter().filter(|&&d| d).count(), 30);
        assert_eq!(truth.outlier.iter().filter(|&&o| o).count(), 20);
        for g in 0..100 {
            assert!(!(truth.de[g] && truth.outlier[g]));
        }
        let bad = SimConfig {
            n_genes: 10,
            n_de: 6,
            n_outliers: 6,
            ..Default::default()
        };
        assert!(simulate_dataset(&bad).is_err());
    }

    #[test]
    fn type1_rejects_everything_at_cutoff_one() {
        let cfg = SimConfig {
            n_genes: 300,
            seed: 13,
            ..Default::default()
        };
        let res = evaluate_type1(&cfg, 2, &[1.0]).unwrap();
        assert_abs_diff_eq!(res.standard[0], 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(res.robust[0], 1.0, epsilon = 0.0);
    }

    #[test]
    fn type1_requires_null_config() {
        let cfg = SimConfig {
            n_de: 5,
            ..Default::default()
        };
        assert!(evaluate_type1(&cfg, 1, &[0.05]).is_err());
    }

    #[test]
    fn recovery_single_rep_works() {
        let cfg = SimConfig {
            n_genes: 2_000,
            seed: 17,
            ..Default::default()
        };
        let res = evaluate_hyperparam_recovery(&cfg, 1).unwrap();
        assert_eq!(res.n_reps, 1);
        assert_eq!(res.d0_standard.min, res.d0_standard.max);
    }

    #[test]
    fn power_all_genes_de_is_well_defined() {
        let cfg = SimConfig {
            n_genes: 400,
            n_de: 400,
            seed: 19,
            ..Default::default()
        };
        let res = evaluate_power_fdr(&cfg, 1).unwrap();
        for v in res.power_standard.iter().chain(&res.power_robust) {
            assert!(v.is_finite());
            assert!((0.0..=1.0).contains(v));
        }
    }
}
