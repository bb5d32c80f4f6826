//! The one-dimensional intermittent map `φ(a) = a(1 + |a|^θ)`, its inverse,
//! the boundary sequences `a_n = φ⁻¹(a_{n-1})` and derivative estimates
//! along its orbits.
//!
//! The negative branch is the odd reflection `a ↦ −φ(−a)`, so the left
//! sequence `a′_n` is handled by the same code with the sign flipped.

use crate::error::{ConfigIssue, Error, Result};

/// Parameters of the neutral fixed point at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermittentParams {
    pub theta: f64,
    pub tau: f64,
    /// Right edge of the unstable fiber of `W0`.
    pub a0: f64,
    /// Left edge of the unstable fiber of `W0`.
    pub a0_prime: f64,
    pub newton_tol: f64,
    pub max_seq_len: usize,
}

impl IntermittentParams {
    pub fn new(theta: f64, a0: f64, a0_prime: f64) -> Result<Self> {
        Self::with_options(theta, a0, a0_prime, 1e-14, 1_000_000)
    }

    pub fn with_options(
        theta: f64,
        a0: f64,
        a0_prime: f64,
        newton_tol: f64,
        max_seq_len: usize,
    ) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(
                ConfigIssue::Parameter(format!("theta must lie in (0,1], got {theta}")).into(),
            );
        }
        if !(a0 > 0.0 && a0 < 1.0 && a0_prime < 0.0 && a0_prime > -1.0) {
            return Err(ConfigIssue::Parameter(format!(
                "need a0_prime < 0 < a0 with both below 1 in modulus, got ({a0_prime}, {a0})"
            ))
            .into());
        }
        if !(newton_tol > 0.0 && newton_tol <= 1e-12) {
            return Err(ConfigIssue::Parameter(format!(
                "newton_tol must be in (0, 1e-12], got {newton_tol}"
            ))
            .into());
        }
        if max_seq_len == 0 {
            return Err(ConfigIssue::Parameter("max_seq_len must be positive".into()).into());
        }
        Ok(IntermittentParams {
            theta,
            tau: 1.0 / theta,
            a0,
            a0_prime,
            newton_tol,
            max_seq_len,
        })
    }

    fn half_width(&self) -> f64 {
        self.a0.max(-self.a0_prime)
    }
}

impl Default for IntermittentParams {
    fn default() -> Self {
        IntermittentParams::new(0.5, 0.5, -0.5).expect("default parameters are valid")
    }
}

#[inline]
fn phi_unchecked(a: f64, theta: f64) -> f64 {
    a * (1.0 + a.abs().powf(theta))
}

/// `φ′(a) = 1 + (1 + θ)|a|^θ`.
#[inline]
pub fn phi_derivative(a: f64, p: &IntermittentParams) -> f64 {
    1.0 + (1.0 + p.theta) * a.abs().powf(p.theta)
}

pub fn phi(a: f64, p: &IntermittentParams) -> Result<f64> {
    if !a.is_finite() || a.abs() > p.half_width() {
        return Err(Error::Domain(format!(
            "phi: |{a}| exceeds the fiber half-width {}",
            p.half_width()
        )));
    }
    Ok(phi_unchecked(a, p.theta))
}

/// Solves `φ(x) = b` by safeguarded Newton iteration inside the bracket
/// `[0, b]` (φ(x) ≥ x on the positive side).
pub fn phi_inverse(b: f64, p: &IntermittentParams) -> Result<f64> {
    let image = phi_unchecked(p.half_width(), p.theta);
    if !b.is_finite() || b.abs() > image {
        return Err(Error::Domain(format!(
            "phi_inverse: {b} outside the image [-{image}, {image}]"
        )));
    }
    if b == 0.0 {
        return Ok(0.0);
    }
    let target = b.abs();
    let x = solve_positive(target, p.theta)?;
    let residual = (phi_unchecked(x, p.theta) - target).abs();
    if residual > p.newton_tol {
        return Err(Error::Convergence(format!(
            "phi_inverse({b}): residual {residual:e}"
        )));
    }
    Ok(x.copysign(b))
}

fn solve_positive(b: f64, theta: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0_f64, b);
    // Fixed-point guess, accurate near the neutral point.
    let mut x = b / (1.0 + b.powf(theta));
    for _ in 0..200 {
        let xt = x.powf(theta);
        let g = x * (1.0 + xt) - b;
        if g == 0.0 {
            return Ok(x);
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dg = 1.0 + (1.0 + theta) * xt;
        let mut next = x - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 2.0 * f64::EPSILON * next.abs() || hi - lo <= 2.0 * f64::EPSILON * hi
        {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Convergence(format!(
        "phi_inverse({b}) exceeded the iteration cap"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

/// `a_0, a_1, …, a_N` with `a_{n+1} = φ⁻¹(a_n)`, all of one sign and
/// strictly decreasing in modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySequence {
    pub values: Vec<f64>,
    pub side: Side,
}

impl BoundarySequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `Δa_n = |a_n − a_{n+1}|`.
    pub fn gap(&self, n: usize) -> Option<f64> {
        Some((self.values.get(n)? - self.values.get(n + 1)?).abs())
    }

    /// The index `n` with `|a_{n+1}| < |x| ≤ |a_n|`, i.e. `x ∈ J_n`.
    /// `None` when `|x|` is at or below the last tabulated value.
    pub fn level_of(&self, x: f64) -> Option<usize> {
        let ax = x.abs();
        if self.values.is_empty() || ax > self.values[0].abs() {
            return None;
        }
        // Number of entries with |a_k| >= |x|.
        let k = self.values.partition_point(|v| v.abs() >= ax);
        if k >= self.values.len() {
            None
        } else {
            Some(k - 1)
        }
    }
}

pub fn boundary_sequence(p: &IntermittentParams, side: Side, n: usize) -> Result<BoundarySequence> {
    if n > p.max_seq_len {
        return Err(Error::Domain(format!(
            "sequence length {n} exceeds max_seq_len {}",
            p.max_seq_len
        )));
    }
    let start = match side {
        Side::Right => p.a0,
        Side::Left => p.a0_prime,
    };
    let mut values = Vec::with_capacity(n + 1);
    values.push(start);
    let mut current = start;
    for _ in 0..n {
        current = phi_inverse(current, p)?;
        values.push(current);
    }
    Ok(BoundarySequence { values, side })
}

/// `log (φⁿ)′(x)` accumulated along the orbit.
pub fn log_derivative_product(x: f64, n: usize, p: &IntermittentParams) -> Result<f64> {
    let mut y = x;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += phi_derivative(y, p).ln();
        y = phi(y, p)?;
    }
    Ok(acc)
}

/// `(φⁿ)′(x)`; the orbit must stay inside the fiber for the first `n` steps.
pub fn derivative_product(x: f64, n: usize, p: &IntermittentParams) -> Result<f64> {
    if n > 0 {
        // The last evaluation point is φ^{n-1}(x); its image may leave the fiber.
        let mut y = x;
        for _ in 0..n - 1 {
            y = phi(y, p)?;
        }
        phi(y, p)?;
    }
    log_derivative_product_inner(x, n, p).map(f64::exp)
}

fn log_derivative_product_inner(x: f64, n: usize, p: &IntermittentParams) -> Result<f64> {
    let mut y = x;
    let mut acc = 0.0;
    for j in 0..n {
        acc += phi_derivative(y, p).ln();
        if j + 1 < n {
            y = phi(y, p)?;
        }
    }
    Ok(acc)
}

/// `|log (φⁱ)′(a) − log (φⁱ)′(b)|` for `a, b ∈ J_n = [a_{n+1}, a_n]`.
pub fn distortion_ratio(
    a: f64,
    b: f64,
    i: usize,
    n: usize,
    seq: &BoundarySequence,
    p: &IntermittentParams,
) -> Result<f64> {
    let (hi, lo) = match (seq.values.get(n), seq.values.get(n + 1)) {
        (Some(hi), Some(lo)) => (hi.abs(), lo.abs()),
        _ => return Err(Error::SequenceExhausted(seq.len())),
    };
    let same_side = |x: f64| match seq.side {
        Side::Right => x >= 0.0,
        Side::Left => x <= 0.0,
    };
    for x in [a, b] {
        if !same_side(x) || x.abs() < lo || x.abs() > hi {
            return Err(Error::Domain(format!("{x} is not in J_{n}")));
        }
    }
    if i > n {
        return Err(Error::Domain(format!(
            "distortion_ratio needs i <= n, got i={i}, n={n}"
        )));
    }
    if a == b || i == 0 {
        return Ok(0.0);
    }
    let la = log_derivative_product_inner(a, i, p)?;
    let lb = log_derivative_product_inner(b, i, p)?;
    Ok((la - lb).abs())
}

/// The distortion normalised by `|φⁱ(a) − φⁱ(b)| / Δa_{n−i}`; bounded
/// uniformly in `n` and `i`.
pub fn distortion_constant(
    a: f64,
    b: f64,
    i: usize,
    n: usize,
    seq: &BoundarySequence,
    p: &IntermittentParams,
) -> Result<f64> {
    let ratio = distortion_ratio(a, b, i, n, seq, p)?;
    if ratio == 0.0 {
        return Ok(0.0);
    }
    let (mut fa, mut fb) = (a, b);
    for _ in 0..i {
        fa = phi(fa, p)?;
        fb = phi(fb, p)?;
    }
    let gap = seq.gap(n - i).ok_or(Error::SequenceExhausted(seq.len()))?;
    Ok(ratio * gap / (fa - fb).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(theta: f64) -> IntermittentParams {
        IntermittentParams::with_options(theta, 0.5, -0.5, 1e-14, 2_000_000).unwrap()
    }

    /// Plain bisection on `x + x^{1+θ} = b`, independent of the Newton path.
    fn bisect(b: f64, theta: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, b);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + mid.powf(1.0 + theta) > b {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.5, &params(1.0)).unwrap(), 0.75);
        assert_eq!(phi(0.0, &params(0.3)).unwrap(), 0.0);
        assert_eq!(phi(0.25, &params(0.5)).unwrap(), 0.375);
        assert_eq!(phi(-0.25, &params(0.5)).unwrap(), -0.375);
        assert!(matches!(phi(0.6, &params(0.5)), Err(Error::Domain(_))));
    }

    #[test]
    fn phi_inverse_examples() {
        let p = params(1.0);
        assert!((phi_inverse(0.75, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(phi_inverse(0.0, &p).unwrap(), 0.0);
        let oracle = bisect(0.5, 1.0);
        assert!((oracle - 0.366_025_403_784_438_6).abs() < 1e-14);
        assert!((phi_inverse(0.5, &p).unwrap() - oracle).abs() < 1e-14);
        assert!(matches!(phi_inverse(0.9, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_round_trip_on_grid() {
        for theta in [0.3, 0.5, 1.0] {
            let p = params(theta);
            for k in 0..10_000 {
                let a = -0.5 + k as f64 / 9_999.0;
                let back = phi_inverse(phi(a, &p).unwrap(), &p).unwrap();
                assert!(
                    (back - a).abs() <= 10.0 * p.newton_tol,
                    "theta={theta} a={a}"
                );
            }
        }
    }

    #[test]
    fn phi_strictly_increasing() {
        let p = params(0.5);
        let mut prev = phi(-0.5, &p).unwrap();
        for k in 1..10_000 {
            let a = -0.5 + k as f64 / 9_999.0;
            let v = phi(a, &p).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn boundary_sequence_examples() {
        let p = params(1.0);
        let s = boundary_sequence(&p, Side::Right, 1).unwrap();
        assert!((s.values[1] - bisect(0.5, 1.0)).abs() < 1e-14);
        assert_eq!(
            boundary_sequence(&p, Side::Right, 0).unwrap().values,
            vec![0.5]
        );
        let left = boundary_sequence(&p, Side::Left, 3).unwrap();
        assert!(left.values.windows(2).all(|w| w[1] > w[0] && w[1] < 0.0));
    }

    #[test]
    fn boundary_sequence_recursion_and_gaps() {
        let p = params(0.5);
        let s = boundary_sequence(&p, Side::Right, 100_000).unwrap();
        for n in 0..s.len() - 1 {
            let f = phi(s.values[n + 1], &p).unwrap();
            assert!((f - s.values[n]).abs() <= p.newton_tol);
            assert!(s.values[n + 1] < s.values[n] && s.values[n + 1] > 0.0);
        }
        // Δa_n · n^{1+1/θ} stays bounded.
        let bound = (1..100_000)
            .map(|n| s.gap(n).unwrap() * (n as f64).powf(1.0 + p.tau))
            .fold(0.0_f64, f64::max);
        assert!(bound.is_finite() && bound < 100.0, "gap envelope {bound}");
        // Gaps eventually decrease.
        assert!((1000..99_999).all(|n| s.gap(n + 1).unwrap() < s.gap(n).unwrap()));
    }

    #[test]
    fn sequence_asymptotics_are_cauchy() {
        for theta in [0.5, 1.0] {
            let p = params(theta);
            let s = boundary_sequence(&p, Side::Right, 1_000_000).unwrap();
            let scaled = |n: usize| s.values[n] * (n as f64).powf(1.0 / theta);
            let rel = (scaled(1_000_000) - scaled(100_000)).abs() / scaled(1_000_000);
            assert!(rel < 0.01, "theta={theta} rel={rel}");
        }
        let p = params(1.0);
        let s = boundary_sequence(&p, Side::Right, 1_000_000).unwrap();
        let scaled = s.values[1_000_000] * 1_000_000.0;
        assert!((scaled - 1.0).abs() < 0.02, "a_N * N = {scaled}");
    }

    #[test]
    fn level_classification() {
        let p = params(0.5);
        let s = boundary_sequence(&p, Side::Right, 50).unwrap();
        let mid = 0.5 * (s.values[5] + s.values[6]);
        assert_eq!(s.level_of(mid), Some(5));
        assert_eq!(s.level_of(0.49), Some(0));
        assert_eq!(s.level_of(0.0), None);
        assert_eq!(s.level_of(0.6), None);
    }

    #[test]
    fn derivative_product_examples() {
        let p = params(1.0);
        assert_eq!(derivative_product(0.3, 0, &p).unwrap(), 1.0);
        assert!((derivative_product(0.5, 1, &p).unwrap() - 2.0).abs() < 1e-15);
        // Chain rule by direct multiplication.
        let s = boundary_sequence(&p, Side::Right, 600).unwrap();
        let mut ratios = Vec::new();
        for n in 50..=500 {
            let x = 0.5 * (s.values[n] + s.values[n + 1]);
            let mut prod = 1.0;
            let mut y = x;
            for _ in 0..n {
                prod *= phi_derivative(y, &p);
                y = phi(y, &p).unwrap();
            }
            let d = derivative_product(x, n, &p).unwrap();
            assert!((d / prod - 1.0).abs() < 1e-9);
            ratios.push(d / (n as f64).powf(p.tau + 1.0));
        }
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(min > 0.0 && max / min < 2.0, "min {min} max {max}");
    }

    #[test]
    fn derivative_lower_bound_over_levels() {
        let p = params(0.5);
        let s = boundary_sequence(&p, Side::Right, 1001).unwrap();
        let min = (1..=1000)
            .map(|n| {
                let x = 0.5 * (s.values[n] + s.values[n + 1]);
                derivative_product(x, n, &p).unwrap() / (n as f64).powf(p.tau + 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
    }

    #[test]
    fn distortion_examples() {
        let p = params(0.5);
        let s = boundary_sequence(&p, Side::Right, 202).unwrap();
        let a = 0.5 * (s.values[10] + s.values[11]);
        assert_eq!(distortion_ratio(a, a, 5, 10, &s, &p).unwrap(), 0.0);
        assert_eq!(
            distortion_ratio(a, s.values[10], 0, 10, &s, &p).unwrap(),
            0.0
        );
        assert!(distortion_ratio(0.49, a, 3, 10, &s, &p).is_err());
        let mut sup = 0.0_f64;
        let mut sup_c = 0.0_f64;
        for n in 10..=200 {
            let (hi, lo) = (s.values[n], s.values[n + 1]);
            let r = distortion_ratio(hi, lo, n, n, &s, &p).unwrap();
            assert!(r.is_finite());
            sup = sup.max(r);
            sup_c = sup_c.max(distortion_constant(hi, lo, n, n, &s, &p).unwrap());
        }
        assert!(sup < 10.0 && sup_c < 10.0, "sup {sup} C {sup_c}");
    }
}
