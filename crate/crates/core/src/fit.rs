//! Log-log slope fitting with bootstrap confidence intervals.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci: (f64, f64),
    pub points: usize,
}

impl SlopeFit {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci.1 - self.ci.0)
    }
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Two-sided 97.5% Student quantile, Cornish-Fisher expansion in `1/df`.
pub(crate) fn t975(df: f64) -> f64 {
    let z: f64 = 1.959_963_984_540_054;
    let g1 = (z.powi(3) + z) / 4.0;
    let g2 = (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / 96.0;
    let g3 = (3.0 * z.powi(7) + 19.0 * z.powi(5) + 17.0 * z.powi(3) - 15.0 * z) / 384.0;
    z + g1 / df + g2 / (df * df) + g3 / (df * df * df)
}

pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `log y` against `log x` over `x ∈ [lo, hi]`.
///
/// The interval is the union of the pairs-bootstrap percentile interval and
/// the normal-theory interval.
pub fn fit_slope(xs: &[f64], ys: &[f64], window: (f64, f64), seed: u64) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (&x, &y) in xs.iter().zip(ys) {
        if x >= window.0 && x <= window.1 {
            if !(x > 0.0 && y > 0.0 && y.is_finite()) {
                return Err(Error::DegenerateWindow(format!(
                    "non-positive value {y} at {x}"
                )));
            }
            lx.push(x.ln());
            ly.push(y.ln());
        }
    }
    if lx.len() < 8 {
        return Err(Error::DegenerateWindow(format!(
            "{} points in [{}, {}], need 8",
            lx.len(),
            window.0,
            window.1
        )));
    }
    let (slope, intercept) =
        ols(&lx, &ly).ok_or_else(|| Error::DegenerateWindow("abscissae do not vary".into()))?;

    let n = lx.len();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let se = (sse / (n as f64 - 2.0) / sxx).sqrt();
    let t = t975(n as f64 - 2.0);

    let mut rng = stream(seed, 0xf17);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for k in 0..n {
            let j = rng.gen_range(0..n);
            bx[k] = lx[j];
            by[k] = ly[j];
        }
        if let Some((s, _)) = ols(&bx, &by) {
            boot.push(s);
        }
    }
    boot.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (slope - t * se, slope + t * se);
    if !boot.is_empty() {
        lo = lo.min(percentile(&boot, 0.025));
        hi = hi.max(percentile(&boot, 0.975));
    }
    Ok(SlopeFit {
        slope,
        intercept,
        ci: (lo.min(slope), hi.max(slope)),
        points: n,
    })
}
