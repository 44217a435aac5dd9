//! File formats for the command-line front end: TSV expression/design/weight
//! readers and the stable result writers.
//!
//! Expression files are TSV with a header row; the first column holds gene
//! ids and the remaining columns one sample each. Missing values are "NA".
//! Design files are TSV with a header of coefficient names and one row per
//! sample, matching the expression columns by order. Weight files have the
//! same shape as the expression file.

use ndarray::Array2;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linmod::{DesignMatrix, ExpressionSet};
use crate::modstats::TopTableRow;

fn parse_cell(path: &str, line: usize, field: &str) -> Result<f64> {
    let t = field.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    match t.to_ascii_lowercase().as_str() {
        "inf" | "+inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    t.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        message: format!("cannot parse {t:?} as a number"),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("cannot read file: {e}"),
    })?;
    Ok(text.lines().map(|s| s.to_string()).collect())
}

/// Parsed expression table: values (NaN = missing), gene ids, sample ids.
#[derive(Debug)]
pub struct ExpressionTable {
    pub values: Array2<f64>,
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

pub fn read_expression(path: &Path) -> Result<ExpressionTable> {
    let pstr = path.display().to_string();
    let lines = read_lines(path)?;
    if lines.len() < 2 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            message: "expected a header row and at least one gene row".into(),
        });
    }
    let header: Vec<&str> = lines[0].split('\t').collect();
    if header.len() < 2 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            message: "header must have a gene-id column and at least one sample".into(),
        });
    }
    let sample_ids: Vec<String> = header[1..].iter().map(|s| s.trim().to_string()).collect();
    let n = sample_ids.len();
    let g = lines.len() - 1;
    let mut values = Array2::from_elem((g, n), f64::NAN);
    let mut gene_ids = Vec::with_capacity(g);
    for (row, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                path: pstr,
                line: row + 2,
                message: format!("expected {} columns, found {}", n + 1, fields.len()),
            });
        }
        gene_ids.push(fields[0].trim().to_string());
        for (col, field) in fields[1..].iter().enumerate() {
            values[[row, col]] = parse_cell(&pstr, row + 2, field)?;
        }
    }
    Ok(ExpressionTable {
        values,
        gene_ids,
        sample_ids,
    })
}

pub fn read_design(path: &Path) -> Result<DesignMatrix> {
    let pstr = path.display().to_string();
    let lines = read_lines(path)?;
    if lines.len() < 2 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            message: "expected a header row and at least one sample row".into(),
        });
    }
    let names: Vec<String> = lines[0].split('\t').map(|s| s.trim().to_string()).collect();
    let p = names.len();
    let n = lines.len() - 1;
    let mut x = Array2::zeros((n, p));
    for (row, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != p {
            return Err(Error::Parse {
                path: pstr,
                line: row + 2,
                message: format!("expected {p} columns, found {}", fields.len()),
            });
        }
        for (col, field) in fields.iter().enumerate() {
            let v = parse_cell(&pstr, row + 2, field)?;
            if v.is_nan() {
                return Err(Error::Parse {
                    path: pstr,
                    line: row + 2,
                    message: "design matrix entries cannot be missing".into(),
                });
            }
            x[[row, col]] = v;
        }
    }
    DesignMatrix::new(x, names)
}

/// Read a weights file of the same shape and gene order as the expression
/// table.
pub fn read_weights(path: &Path, expr: &ExpressionTable) -> Result<Array2<f64>> {
    let pstr = path.display().to_string();
    let table = read_expression(path)?;
    if table.values.dim() != expr.values.dim() {
        return Err(Error::Dimension(format!(
            "weights shape {:?} does not match expression shape {:?}",
            table.values.dim(),
            expr.values.dim()
        )));
    }
    if table.gene_ids != expr.gene_ids {
        return Err(Error::Parse {
            path: pstr,
            line: 0,
            message: "weights gene ids do not match the expression file".into(),
        });
    }
    Ok(table.values)
}

pub fn build_expression_set(
    expr: ExpressionTable,
    weights: Option<Array2<f64>>,
) -> Result<ExpressionSet> {
    ExpressionSet::new(expr.values, weights, expr.gene_ids, expr.sample_ids)
}

// ---------------------------------------------------------------------------
// Stable formatting
// ---------------------------------------------------------------------------

/// Format with 6 significant digits, printf %g style: fixed notation for
/// exponents in [-4, 5], scientific otherwise, trailing zeros trimmed.
/// Non-finite values render as NA / Inf / -Inf. Output is byte-stable across
/// platforms.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // {:.5e} rounds the mantissa to 6 significant digits and carries the
    // exponent, e.g. -1.23456e-7
    let s = format!("{:.5e}", x);
    let (mant, exp) = s.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 6);

    let body = if (-4..6).contains(&exp) {
        if exp >= 0 {
            let ip = exp as usize + 1;
            let int_part: String = digits.chars().take(ip).collect();
            let frac_part: String = digits.chars().skip(ip).collect();
            let frac = frac_part.trim_end_matches('0');
            if frac.is_empty() {
                int_part
            } else {
                format!("{int_part}.{frac}")
            }
        } else {
            let zeros = "0".repeat((-exp - 1) as usize);
            let frac = format!("{zeros}{digits}");
            let frac = frac.trim_end_matches('0');
            format!("0.{frac}")
        }
    } else {
        let mant_digits = digits.trim_end_matches('0');
        let (first, rest) = mant_digits.split_at(1);
        if rest.is_empty() {
            format!("{first}e{exp}")
        } else {
            format!("{first}.{rest}e{exp}")
        }
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

/// Columns of the top-table file, in order.
pub const TOPTABLE_HEADER: &str =
    "gene_id\tlogFC\tAveExpr\tt\tP.Value\tadj.P.Val\tdf.total\tdf.prior\ts2.post";

pub fn render_toptable(rows: &[TopTableRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TOPTABLE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.gene_id);
        for v in [
            r.log_fc, r.avg_expr, r.t, r.p_value, r.fdr, r.df_total, r.df_prior, r.s2_post,
        ] {
            out.push('\t');
            out.push_str(&fmt_g6(v));
        }
        out.push('\n');
    }
    out
}

/// Write a fully rendered file atomically: the content lands under the final
/// name only after a successful write, so failures leave no partial output.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
