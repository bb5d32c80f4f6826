//! The tower over the base cell: points, dynamics, projection, partition
//! labels, cylinder diameters, the reference weight, and moduli of
//! continuity in separation time. Discretization lives in [`ulam`] and the
//! stationary density in [`density`].

pub mod density;
pub mod markov;
pub mod ulam;

use crate::error::{Error, Result};
use crate::model::{HyperbolicModel, Point2};
use crate::returns::{first_return, fit_geometric, separation_time, LevelTable, Return, BASE_CELL};

pub use density::{invariant_density, InvariantDensity};
pub use markov::NeutralPartition;
pub use ulam::{
    ulam_discretize, Discretization, TowerState, TransferMatrix, UlamGrid, UlamRegistry, UlamScheme,
};

/// A point `(x, l)` of the tower; `ret` caches the first return of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerPoint {
    pub base: Point2,
    pub level: u64,
    pub ret: Return,
}

impl TowerPoint {
    pub fn label(&self) -> (u64, u64) {
        (self.level, self.ret.cylinder)
    }
}

/// Dynamics on the tower for a fixed model.
#[derive(Clone, Copy)]
pub struct Tower<'a> {
    pub model: &'a HyperbolicModel,
    pub table: &'a LevelTable,
    pub cap: u64,
}

impl<'a> Tower<'a> {
    pub fn new(model: &'a HyperbolicModel, table: &'a LevelTable, cap: u64) -> Self {
        Tower { model, table, cap }
    }

    pub fn point(&self, base: Point2, level: u64) -> Result<TowerPoint> {
        let ret = first_return(base, self.model, self.table, self.cap)?;
        if level >= ret.r {
            return Err(Error::InvalidLevel { level, ret: ret.r });
        }
        Ok(TowerPoint { base, level, ret })
    }

    pub fn step(&self, t: &TowerPoint) -> Result<TowerPoint> {
        if t.level >= t.ret.r {
            return Err(Error::InvalidLevel {
                level: t.level,
                ret: t.ret.r,
            });
        }
        if t.level + 1 < t.ret.r {
            return Ok(TowerPoint {
                level: t.level + 1,
                ..*t
            });
        }
        self.point(t.ret.endpoint, 0)
    }

    pub fn iterate(&self, t: &TowerPoint, n: u64) -> Result<TowerPoint> {
        let mut cur = *t;
        for _ in 0..n {
            cur = self.step(&cur)?;
        }
        Ok(cur)
    }

    /// `π(x, l) = f^l(x)`.
    pub fn project(&self, t: &TowerPoint) -> Result<Point2> {
        let mut y = t.base;
        for _ in 0..t.level {
            y = self.model.step(y)?;
        }
        Ok(y)
    }

    /// Labels of `t, F t, …, Fⁿ t`; two points share a cylinder of `Q_n`
    /// iff these sequences agree.
    pub fn cylinder(&self, t: &TowerPoint, n: u64) -> Result<Vec<(u64, u64)>> {
        let mut out = Vec::with_capacity(n as usize + 1);
        let mut cur = *t;
        out.push(cur.label());
        for _ in 0..n {
            cur = self.step(&cur)?;
            out.push(cur.label());
        }
        Ok(out)
    }

    /// Separation time of two tower points: 0 unless they share a label.
    pub fn separation(&self, x: &TowerPoint, y: &TowerPoint, max_returns: u64) -> Result<u64> {
        if x.label() != y.label() {
            return Ok(0);
        }
        Ok(separation_time(
            x.base,
            y.base,
            self.model,
            self.table,
            max_returns,
            self.cap,
        )?
        .s)
    }
}

/// Exponent of the polynomial contraction and diameter rates.
pub fn diameter_exponent(m: &HyperbolicModel) -> f64 {
    if m.is_intermittent() {
        m.params().tau + 1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiameterReport {
    pub k: u64,
    /// `sup d(πF^k x, πF^k y)·k^α` over the accepted pairs.
    pub sup: f64,
    pub accepted: usize,
    /// Pairs that did not share a `Q_{2k}` cylinder.
    pub rejected: usize,
}

/// Scaled distances of `F^k`-images over pairs sharing a `Q_{2k}` cylinder.
pub fn diameter_check(
    tower: &Tower<'_>,
    k: u64,
    pairs: &[(TowerPoint, TowerPoint)],
) -> Result<DiameterReport> {
    let scale = (k as f64).powf(diameter_exponent(tower.model));
    let mut report = DiameterReport {
        k,
        sup: 0.0,
        accepted: 0,
        rejected: 0,
    };
    for (x, y) in pairs {
        if tower.cylinder(x, 2 * k)? != tower.cylinder(y, 2 * k)? {
            report.rejected += 1;
            continue;
        }
        let px = tower.project(&tower.iterate(x, k)?)?;
        let py = tower.project(&tower.iterate(y, k)?)?;
        report.sup = report.sup.max(tower.model.distance(px, py) * scale);
        report.accepted += 1;
    }
    Ok(report)
}

/// `diam πF^k(Q)` for the `Q_{2k}` cylinder `Q` of `t`, for `k = 1..=kmax`,
/// from derivatives along the orbit of `t`.
///
/// The unstable side is the full crossing at the end of the return running
/// at time `2k`, pulled back to time `k`; the stable side is the unit height
/// of the base pushed forward to time `k`. Cylinders this deep are far below
/// double resolution, so they cannot be sampled as explicit pairs.
pub fn cylinder_diameters(tower: &Tower<'_>, t: &TowerPoint, kmax: u64) -> Result<Vec<f64>> {
    let m = tower.model;
    let l = t.level;
    let horizon = l + 2 * kmax;
    // cumulative log rates along the orbit of the base point
    let mut log_du = vec![0.0];
    let mut log_ds = vec![0.0];
    let mut completions = Vec::new();
    let mut y = t.base;
    let mut elapsed = 0u64;
    loop {
        let ret = first_return(y, m, tower.table, tower.cap)?;
        for _ in 0..ret.r {
            let (next, _, du, ds) = m.step_with_jacobians(y)?;
            log_du.push(log_du.last().unwrap() + du.ln());
            log_ds.push(log_ds.last().unwrap() + ds.ln());
            y = next;
        }
        elapsed += ret.r;
        completions.push(elapsed);
        if elapsed >= horizon {
            break;
        }
    }
    let mut out = Vec::with_capacity(kmax as usize);
    for k in 1..=kmax {
        let now = (l + k) as usize;
        let end = completions[completions.partition_point(|&c| c < l + 2 * k)] as usize;
        let unstable = (log_du[now] - log_du[end]).exp();
        let stable = log_ds[now].exp();
        out.push(unstable.max(stable));
    }
    Ok(out)
}

/// `sup_k k^α·diam πF^k(Q)` for the cylinders of `t`.
pub fn diameter_envelope(tower: &Tower<'_>, t: &TowerPoint, kmax: u64) -> Result<f64> {
    let alpha = diameter_exponent(tower.model);
    let d = cylinder_diameters(tower, t, kmax)?;
    Ok(d.iter()
        .enumerate()
        .map(|(i, v)| v * ((i + 1) as f64).powf(alpha))
        .fold(0.0, f64::max))
}

/// Truncated infinite product with its convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedProduct {
    pub value: f64,
    /// `|log P_N − log P_{N/2}|`, a proxy for the neglected tail.
    pub tail_estimate: f64,
    pub converged: bool,
}

/// `exp Σ_{n<N} terms[n]` with a halving-based tail estimate.
pub fn truncated_log_product(terms: &[f64], tol: f64) -> TruncatedProduct {
    let n = terms.len();
    let total: f64 = terms.iter().sum();
    let half: f64 = terms[..n / 2].iter().sum();
    let tail_estimate = if n < 2 { 0.0 } else { (total - half).abs() };
    TruncatedProduct {
        value: total.exp(),
        tail_estimate,
        converged: tail_estimate <= tol,
    }
}

/// `û(x)` truncated at `n` factors, using the point of the reference leaf
/// (stable coordinate at the centre of the cell) on the stable leaf of `x`.
pub fn reference_measure_weight(
    m: &HyperbolicModel,
    x: Point2,
    n: usize,
    tol: f64,
) -> Result<TruncatedProduct> {
    reference_measure_weight_with(m, x, n, tol, &|_, du| du.ln())
}

/// As [`reference_measure_weight`] with a caller-supplied log unstable
/// Jacobian `log_jac(point, model_derivative)`.
pub fn reference_measure_weight_with(
    m: &HyperbolicModel,
    x: Point2,
    n: usize,
    tol: f64,
    log_jac: &dyn Fn(Point2, f64) -> f64,
) -> Result<TruncatedProduct> {
    let centre = m.cells[x.cell].center().1;
    let mut y = x;
    let mut r = Point2::new(x.cell, x.a, centre);
    let mut terms = Vec::with_capacity(n);
    for _ in 0..n {
        let (ny, _, du_y) = m.step_with_derivative(y)?;
        let (nr, _, du_r) = m.step_with_derivative(r)?;
        terms.push(log_jac(y, du_y) - log_jac(r, du_r));
        y = ny;
        r = nr;
    }
    Ok(truncated_log_product(&terms, tol))
}

/// Families of moduli of continuity in separation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Modulus {
    /// `|Δ| ≤ C·β^s`
    Geometric(f64),
    /// `|Δ| ≤ D / max(s,1)^θ`
    Polynomial(f64),
}

/// Least constant making every sampled `(value_x, value_y, s)` obey the modulus.
pub fn modulus_estimate(pairs: &[(f64, f64, u64)], family: Modulus) -> f64 {
    pairs
        .iter()
        .map(|&(u, v, s)| {
            let d = (u - v).abs();
            match family {
                Modulus::Geometric(beta) => d / beta.powf(s as f64),
                Modulus::Polynomial(theta) => d * (s.max(1) as f64).powf(theta),
            }
        })
        .fold(0.0, f64::max)
}

/// Fitted constants of `|JF̄ᵏ(x)/JF̄ᵏ(y) − 1| ≤ C_F·β^{s̄}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFit {
    pub c_f: f64,
    pub beta: f64,
    /// `(|ratio − 1|, separation of the images)`.
    pub samples: Vec<(f64, u64)>,
}

/// Jacobian-ratio regularity over pairs in common cylinders of depth
/// `returns` return times.
pub fn jacobian_regularity(
    m: &HyperbolicModel,
    table: &LevelTable,
    pairs: &[(f64, f64)],
    returns: usize,
    cap: u64,
) -> Result<JacobianFit> {
    let b = m.cells[BASE_CELL].center().1;
    let mut samples = Vec::new();
    for &(a, a2) in pairs {
        let (mut x, mut y) = (Point2::new(BASE_CELL, a, b), Point2::new(BASE_CELL, a2, b));
        let mut log_ratio = 0.0;
        let mut together = true;
        for _ in 0..returns {
            let rx = first_return(x, m, table, cap)?;
            let ry = first_return(y, m, table, cap)?;
            if rx.cylinder != ry.cylinder {
                together = false;
                break;
            }
            log_ratio += rx.log_du - ry.log_du;
            x = rx.endpoint;
            y = ry.endpoint;
        }
        if !together {
            continue;
        }
        let s = separation_time(x, y, m, table, 64, cap)?.s;
        samples.push((log_ratio.exp_m1().abs(), s));
    }
    let (_, beta) = fit_geometric(&samples)
        .ok_or_else(|| Error::InsufficientSamples("no pair shared a cylinder".into()))?;
    let beta = beta.min(1.0 - 1e-12);
    let c_f = samples
        .iter()
        .map(|&(v, s)| v / beta.powf(s as f64))
        .fold(0.0, f64::max);
    Ok(JacobianFit { c_f, beta, samples })
}
