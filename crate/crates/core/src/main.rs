//! Command-line front end: genewise model fitting with empirical-Bayes
//! moderated statistics, and the simulation evaluations.

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ebvar::hyperprior::HyperpriorOptions;
use ebvar::io::{
    build_expression_set, fmt_g6, read_design, read_expression, read_weights, render_toptable,
    write_atomic,
};
use ebvar::linmod::fit_all;
use ebvar::modstats::{eb_moderate, top_table};
use ebvar::quadrature::WinsorSpec;
use ebvar::sim::{
    evaluate_hyperparam_recovery, evaluate_power_fdr, evaluate_type1, PowerFdrResult,
    RecoveryResult, SimConfig, SummaryStats, Type1Result,
};
use ebvar::Error;

#[derive(Parser)]
#[command(
    name = "ebvar",
    version,
    about = "Genewise linear models with robust empirical-Bayes variance moderation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit genewise linear models and write a moderated-t top table.
    Fit(FitArgs),
    /// Generate data from the hierarchical model and score the pipelines.
    Simulate(SimArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Expression TSV: header row, first column gene ids, "NA" for missing.
    #[arg(long)]
    expr: PathBuf,
    /// Design TSV: header of coefficient names, one row per sample.
    #[arg(long)]
    design: PathBuf,
    /// Optional precision-weight TSV with the same shape as the expression.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Robust hyperparameter estimation (Winsorized moments, per-gene prior df).
    #[arg(long)]
    robust: bool,
    /// Let the prior variance depend on average log-expression.
    #[arg(long)]
    trend: bool,
    /// Winsorizing tail proportions, lower,upper; each in (0, 0.5).
    #[arg(long, value_name = "L,U", default_value = "0.05,0.1")]
    winsor_tail_p: String,
    /// Coefficient to test, by design column name or 1-based index
    /// (default: last column).
    #[arg(long)]
    coef: Option<String>,
    /// Keep only rows with adjusted p-value at or below this cutoff.
    #[arg(long)]
    fdr: Option<f64>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// True prior degrees of freedom ("inf" allowed).
    #[arg(long, default_value = "4", value_parser = parse_df)]
    d0: f64,
    /// True prior variance.
    #[arg(long, default_value_t = 0.04)]
    s02: f64,
    #[arg(long, default_value_t = 10_000)]
    genes: usize,
    #[arg(long, default_value_t = 6)]
    samples: usize,
    /// Count of hypervariable genes.
    #[arg(long, default_value_t = 0)]
    outliers: usize,
    /// Prior df of the hypervariable genes.
    #[arg(long, default_value_t = 0.5)]
    outlier_d0: f64,
    /// Count of differentially expressed genes.
    #[arg(long, default_value_t = 0)]
    de: usize,
    /// Standard deviation of the true log-fold-changes.
    #[arg(long, default_value_t = 2.0)]
    lfc_sd: f64,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Type-I error table (requires a null configuration).
    #[arg(long)]
    null: bool,
    /// Power and false-discovery curves (requires --de > 0).
    #[arg(long)]
    power: bool,
    /// Hyperparameter recovery summaries.
    #[arg(long)]
    recovery: bool,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

fn parse_df(s: &str) -> Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>().map_err(|e| e.to_string())
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Lib(err) => match err {
            Error::Domain { .. } | Error::Numerical(_) => 4,
            _ => 3,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Lib(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_winsor(spec: &str) -> Result<WinsorSpec, CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 2 {
        return Err(CliError::Usage(format!(
            "--winsor-tail-p expects L,U (got {spec:?})"
        )));
    }
    let lower: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("cannot parse {:?}", parts[0])))?;
    let upper: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("cannot parse {:?}", parts[1])))?;
    WinsorSpec::new(lower, upper).map_err(|_| {
        CliError::Usage(format!(
            "tail proportions must lie strictly in (0, 0.5): {spec}"
        ))
    })
}

fn run_fit(args: FitArgs) -> Result<(), CliError> {
    let winsor = parse_winsor(&args.winsor_tail_p)?;
    if let Some(f) = args.fdr {
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::Usage(format!("--fdr {f} must lie in [0, 1]")));
        }
    }

    let expr = read_expression(&args.expr)?;
    let design = read_design(&args.design)?;
    if design.n_samples() != expr.sample_ids.len() {
        return Err(CliError::Lib(Error::Dimension(format!(
            "design has {} rows but expression has {} samples",
            design.n_samples(),
            expr.sample_ids.len()
        ))));
    }
    let weights = match &args.weights {
        Some(p) => Some(read_weights(p, &expr)?),
        None => None,
    };
    let coefficient = match &args.coef {
        Some(spec) => design.resolve_coefficient(spec)?,
        None => design.n_coefficients() - 1,
    };

    let data = build_expression_set(expr, weights)?;
    let fits = fit_all(&data, &design)?;
    let opts = HyperpriorOptions {
        robust: args.robust,
        winsor,
        ..Default::default()
    };
    let eb = eb_moderate(&fits, coefficient, &opts, args.trend)?;
    let rows = top_table(data.gene_ids(), &fits, &eb, args.fdr);

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    write_atomic(&args.out.join("toptable.tsv"), &render_toptable(&rows))?;

    // summary of the fitted prior
    let hp = &eb.hyperprior;
    let mut dfs: Vec<f64> = fits
        .iter()
        .filter(|f| f.usable())
        .map(|f| f.df_residual)
        .collect();
    dfs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let df_median = if dfs.is_empty() {
        f64::NAN
    } else {
        dfs[dfs.len() / 2]
    };
    let mut summary = String::new();
    let mut push = |k: &str, v: String| {
        summary.push_str(k);
        summary.push('\t');
        summary.push_str(&v);
        summary.push('\n');
    };
    push("n.genes", data.n_genes().to_string());
    push("n.samples", data.n_samples().to_string());
    push("coefficient", design.column_names()[coefficient].clone());
    push("robust", args.robust.to_string());
    push("trend", args.trend.to_string());
    push("df.residual.median", fmt_g6(df_median));
    push("d0", fmt_g6(hp.d0));
    if hp.trend_enabled {
        let mut s = hp.s02.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        push("s02.min", fmt_g6(s[0]));
        push("s02.median", fmt_g6(s[s.len() / 2]));
        push("s02.max", fmt_g6(s[s.len() - 1]));
    } else {
        push("s02", fmt_g6(hp.s02[0]));
    }
    push("d.outlier", fmt_g6(hp.d_outlier));
    push("n.genes.shrunk", hp.n_shrunk().to_string());
    write_atomic(&args.out.join("summary.tsv"), &summary)?;

    if hp.trend_enabled {
        let mut trend = String::from("gene_id\tAveExpr\ts02\n");
        for (g, id) in data.gene_ids().iter().enumerate() {
            trend.push_str(id);
            trend.push('\t');
            trend.push_str(&fmt_g6(fits[g].avg_expr.unwrap_or(f64::NAN)));
            trend.push('\t');
            trend.push_str(&fmt_g6(hp.s02[g]));
            trend.push('\n');
        }
        write_atomic(&args.out.join("s02_trend.tsv"), &trend)?;
    }
    Ok(())
}

fn run_simulate(args: SimArgs) -> Result<(), CliError> {
    if !(args.null || args.power || args.recovery) {
        return Err(CliError::Usage(
            "choose at least one evaluation: --null, --power, --recovery".into(),
        ));
    }
    if args.null && (args.de > 0 || args.outliers > 0) {
        return Err(CliError::Usage(
            "--null requires a null configuration: --de 0 and --outliers 0".into(),
        ));
    }
    if args.power && args.de == 0 {
        return Err(CliError::Usage("--power requires --de > 0".into()));
    }
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let cfg = SimConfig {
        n_genes: args.genes,
        n_samples: args.samples,
        d0_true: args.d0,
        s02_true: args.s02,
        n_outliers: args.outliers,
        d0_outlier_true: args.outlier_d0,
        n_de: args.de,
        lfc_sd: args.lfc_sd,
        seed: args.seed,
    };
    cfg.validate().map_err(CliError::Lib)?;
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;

    if args.null {
        let res = evaluate_type1(&cfg, args.reps, &[0.001, 0.01, 0.05, 0.1])?;
        write_type1(&args.out, &res)?;
    }
    if args.power {
        let res = evaluate_power_fdr(&cfg, args.reps)?;
        write_power(&args.out, &res)?;
    }
    if args.recovery {
        let res = evaluate_hyperparam_recovery(&cfg, args.reps)?;
        write_recovery(&args.out, &res, cfg.d0_true)?;
    }
    Ok(())
}

/// JSON representation of a float that may be infinite.
fn jnum(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        Value::Null
    } else if x > 0.0 {
        json!("Inf")
    } else {
        json!("-Inf")
    }
}

fn jvec(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| jnum(x)).collect())
}

fn write_type1(out: &Path, res: &Type1Result) -> Result<(), CliError> {
    let mut tsv = String::from("cutoff\tstandard\trobust\n");
    for k in 0..res.cutoffs.len() {
        tsv.push_str(&format!(
            "{}\t{}\t{}\n",
            fmt_g6(res.cutoffs[k]),
            fmt_g6(res.standard[k]),
            fmt_g6(res.robust[k])
        ));
    }
    write_atomic(&out.join("type1.tsv"), &tsv)?;
    let j = json!({
        "n_reps": res.n_reps,
        "cutoffs": jvec(&res.cutoffs),
        "standard": jvec(&res.standard),
        "robust": jvec(&res.robust),
    });
    write_atomic(&out.join("type1.json"), &format!("{:#}\n", j))?;
    Ok(())
}

fn write_power(out: &Path, res: &PowerFdrResult) -> Result<(), CliError> {
    let mut tsv =
        String::from("metric\tcutoff\tstandard\trobust\tstandard.se\trobust.se\tdiff.se\n");
    for k in 0..res.fdr_cutoffs.len() {
        tsv.push_str(&format!(
            "power\t{}\t{}\t{}\t{}\t{}\t{}\n",
            fmt_g6(res.fdr_cutoffs[k]),
            fmt_g6(res.power_standard[k]),
            fmt_g6(res.power_robust[k]),
            fmt_g6(res.power_standard_se[k]),
            fmt_g6(res.power_robust_se[k]),
            fmt_g6(res.power_diff_se[k])
        ));
    }
    tsv.push_str(&format!(
        "fd_top{}\tNA\t{}\t{}\t{}\t{}\t{}\n",
        res.top_rank,
        fmt_g6(res.fd_top_standard),
        fmt_g6(res.fd_top_robust),
        fmt_g6(res.fd_standard_se),
        fmt_g6(res.fd_robust_se),
        fmt_g6(res.fd_diff_se)
    ));
    write_atomic(&out.join("power_fdr.tsv"), &tsv)?;
    let j = json!({
        "n_reps": res.n_reps,
        "fdr_cutoffs": jvec(&res.fdr_cutoffs),
        "power_standard": jvec(&res.power_standard),
        "power_robust": jvec(&res.power_robust),
        "power_standard_se": jvec(&res.power_standard_se),
        "power_robust_se": jvec(&res.power_robust_se),
        "power_diff_se": jvec(&res.power_diff_se),
        "top_rank": res.top_rank,
        "fd_top_standard": jnum(res.fd_top_standard),
        "fd_top_robust": jnum(res.fd_top_robust),
        "fd_standard_se": jnum(res.fd_standard_se),
        "fd_robust_se": jnum(res.fd_robust_se),
        "fd_diff_se": jnum(res.fd_diff_se),
    });
    write_atomic(&out.join("power_fdr.json"), &format!("{:#}\n", j))?;
    Ok(())
}

fn stats_json(s: &SummaryStats) -> Value {
    json!({
        "min": jnum(s.min),
        "q1": jnum(s.q1),
        "median": jnum(s.median),
        "q3": jnum(s.q3),
        "max": jnum(s.max),
    })
}

fn write_recovery(out: &Path, res: &RecoveryResult, d0_true: f64) -> Result<(), CliError> {
    let mut tsv = String::from("parameter\tmethod\tmin\tq1\tmedian\tq3\tmax\n");
    let mut row = |name: &str, method: &str, s: &SummaryStats| {
        tsv.push_str(&format!(
            "{name}\t{method}\t{}\t{}\t{}\t{}\t{}\n",
            fmt_g6(s.min),
            fmt_g6(s.q1),
            fmt_g6(s.median),
            fmt_g6(s.q3),
            fmt_g6(s.max)
        ));
    };
    row("d0", "standard", &res.d0_standard);
    row("d0", "robust", &res.d0_robust);
    row("s02", "standard", &res.s02_standard);
    row("s02", "robust", &res.s02_robust);
    tsv.push_str(&format!(
        "robust_closer_d0\tboth\t{}\tNA\tNA\tNA\t{}\n",
        res.robust_closer_d0, res.n_reps
    ));
    write_atomic(&out.join("recovery.tsv"), &tsv)?;
    let j = json!({
        "n_reps": res.n_reps,
        "d0_true": jnum(d0_true),
        "d0": { "standard": stats_json(&res.d0_standard), "robust": stats_json(&res.d0_robust) },
        "s02": { "standard": stats_json(&res.s02_standard), "robust": stats_json(&res.s02_robust) },
        "robust_closer_d0": res.robust_closer_d0,
    });
    write_atomic(&out.join("recovery.json"), &format!("{:#}\n", j))?;
    Ok(())
}
