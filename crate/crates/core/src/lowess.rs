//! Locally-weighted linear regression with tricube weights and optional
//! bisquare robustness iterations. Used for the covariate trend on the log
//! variances.

use crate::error::{Error, Result};

/// Smooth `y` as a function of `x`, returning fitted values at every input
/// point in the original order.
///
/// `span` is the fraction of points in each local window; `robust_iterations`
/// is the number of bisquare reweighting passes (0 for a plain fit). A
/// constant `x` yields the mean of `y` everywhere.
pub fn lowess(x: &[f64], y: &[f64], span: f64, robust_iterations: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "x has {n} points but y has {}",
            y.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::domain(
            "lowess",
            format!("span {span} not in (0, 1]"),
        ));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("lowess inputs must be finite".into()));
    }

    let mean_y = y.iter().sum::<f64>() / n as f64;
    if n < 3 || x.iter().all(|&v| v == x[0]) {
        return Ok(vec![mean_y; n]);
    }

    // sort by x; ties keep input order so results are deterministic
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let q = ((span * n as f64).ceil() as usize).clamp(2, n);
    let mut robust_w = vec![1.0_f64; n];
    let mut fitted = vec![0.0_f64; n];

    // scale reference for the robustness passes: a residual spread this far
    // below the spread of y means the fit is already essentially exact
    let mut dev: Vec<f64> = ys.iter().map(|&v| (v - mean_y).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let y_scale = median_sorted(&dev);

    for pass in 0..=robust_iterations {
        let mut lo = 0usize;
        for i in 0..n {
            // slide the window of q nearest neighbours
            while lo + q < n && xs[lo + q] - xs[i] < xs[i] - xs[lo] {
                lo += 1;
            }
            let hi = lo + q; // exclusive
            let h = (xs[i] - xs[lo]).max(xs[hi - 1] - xs[i]);

            let mut sw = 0.0;
            let mut swx = 0.0;
            let mut swy = 0.0;
            let mut swxx = 0.0;
            let mut swxy = 0.0;
            for j in lo..hi {
                let kernel = if h > 0.0 {
                    tricube((xs[j] - xs[i]).abs() / h)
                } else {
                    1.0
                };
                let w = kernel * robust_w[j];
                if w <= 0.0 {
                    continue;
                }
                sw += w;
                swx += w * xs[j];
                swy += w * ys[j];
                swxx += w * xs[j] * xs[j];
                swxy += w * xs[j] * ys[j];
            }
            fitted[i] = if sw <= 0.0 {
                ys[i]
            } else {
                let denom = sw * swxx - swx * swx;
                if denom.abs() <= 1e-12 * sw * swxx.max(1e-300) {
                    swy / sw
                } else {
                    let slope = (sw * swxy - swx * swy) / denom;
                    let intercept = (swy - slope * swx) / sw;
                    intercept + slope * xs[i]
                }
            };
        }

        if pass == robust_iterations {
            break;
        }
        // bisquare robustness weights from the residuals
        let mut abs_res: Vec<f64> = (0..n).map(|i| (ys[i] - fitted[i]).abs()).collect();
        abs_res.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = median_sorted(&abs_res);
        if s <= 1e-9 * y_scale.max(f64::MIN_POSITIVE) {
            break; // fit is exact to rounding; reweighting would be noise-driven
        }
        for i in 0..n {
            let u = (ys[i] - fitted[i]) / (6.0 * s);
            robust_w[i] = if u.abs() < 1.0 {
                let t = 1.0 - u * u;
                t * t
            } else {
                0.0
            };
        }
    }

    let mut out = vec![0.0_f64; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = fitted[pos];
    }
    Ok(out)
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
