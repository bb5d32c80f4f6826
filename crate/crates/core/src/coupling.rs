//! Coupling of two base densities through simultaneous returns of the pair
//! orbit to the base.
//!
//! Stopping times run on the continuous tower. The subtraction recursion runs
//! on exact grids of product cylinders: a cylinder of matched return blocks is
//! sent by `F̂ⁱ` onto the base squared, so uniform image bins pull back through
//! the recorded branch itineraries to grid points whose Jacobians are products
//! of branch derivatives. Values on a cylinder are kept relative to a
//! per-stage log-Jacobian reference so deep stages stay in floating range.
//! The distance between the pushed densities comes from powers of a tower
//! transfer matrix.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ConfigIssue, Error, Result};
use crate::model::{HyperbolicModel, Point2};
use crate::returns::{first_return, return_time, Return, ReturnHistogram, BASE_CELL};
use crate::rng::par_chunks;
use crate::tower::{Tower, TowerPoint, TowerState, TransferMatrix};

/// Increments `T_{i+1} − T_i` tracked for `i < INCREMENTS`.
pub const INCREMENTS: usize = 11;
pub const MIN_INCREMENT_SAMPLES: u64 = 100_000;
/// Relative slack on the `e^K` ratio budget.
pub const RATIO_SLACK: f64 = 1e-6;

fn bad(msg: String) -> Error {
    ConfigIssue::Parameter(msg).into()
}

/// `e^K (1 − ((i−1)/i)^ρ)`, evaluated without cancellation.
pub fn epsilon_schedule(k: f64, rho: f64, i: usize) -> f64 {
    assert!(i >= 1, "schedule starts at i = 1");
    k.exp() * -(rho * (-1.0 / i as f64).ln_1p()).exp_m1()
}

/// `((i−1)/i)^ρ`.
pub fn decrease_factor(rho: f64, i: usize) -> f64 {
    (rho * (-1.0 / i as f64).ln_1p()).exp()
}

/// Smallest `i` with `ε_i < 1`.
pub fn first_admissible_index(k: f64, rho: f64) -> usize {
    let mut hi = 1usize;
    while epsilon_schedule(k, rho, hi) >= 1.0 {
        hi *= 2;
    }
    let mut lo = hi / 2;
    // ε is decreasing: ε_lo ≥ 1 > ε_hi.
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if epsilon_schedule(k, rho, mid) < 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConfig {
    /// Log of the per-cylinder max/min budget.
    pub k: f64,
    pub rho: f64,
    pub beta: f64,
    /// Regularity exponent of the coupled densities.
    pub regularity: f64,
    /// First stage that subtracts.
    pub i0: usize,
    pub zeta: f64,
    /// Steps each stopping time waits before looking for the base.
    pub lag: u64,
}

impl CouplingConfig {
    /// Defaults from a fitted Jacobian constant: `K = margin·(Ĉ + Ĉ/(1−β))`
    /// with `Ĉ = 2 c_f`, `ρ = ζ + 3/2`, regularity `e^K (ρ+1)`, and `i0` the
    /// first index with `ε_i < 1`.
    pub fn derive(c_f: f64, beta: f64, zeta: f64, margin: f64, lag: u64) -> Result<Self> {
        if !(margin > 1.0) {
            return Err(bad(format!("K margin must exceed 1, got {margin}")));
        }
        if !(beta > 0.0 && beta < 1.0) || !(c_f >= 0.0) {
            return Err(bad(format!(
                "need c_f ≥ 0 and β in (0,1), got {c_f}, {beta}"
            )));
        }
        let c_hat = 2.0 * c_f;
        let k = margin * (c_hat + c_hat / (1.0 - beta));
        let rho = zeta + 1.5;
        let cfg = CouplingConfig {
            k,
            rho,
            beta,
            regularity: k.exp() * (rho + 1.0),
            i0: first_admissible_index(k, rho),
            zeta,
            lag,
        };
        cfg.validate(c_f)?;
        Ok(cfg)
    }

    pub fn validate(&self, c_f: f64) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(bad(format!("β must lie in (0,1), got {}", self.beta)));
        }
        if !(self.zeta > 1.0) {
            return Err(bad(format!("ζ must exceed 1, got {}", self.zeta)));
        }
        if self.lag == 0 || self.i0 == 0 {
            return Err(bad("lag and i0 must be positive".into()));
        }
        let c_hat = 2.0 * c_f;
        let k_min = c_hat + c_hat / (1.0 - self.beta);
        if !(self.k > k_min) {
            return Err(bad(format!("K = {} must exceed {k_min}", self.k)));
        }
        let rho_max = self.regularity / self.k.exp();
        if !(self.rho > self.zeta + 1.0 && self.rho < rho_max) {
            return Err(bad(format!(
                "ρ = {} must lie in ({}, {rho_max})",
                self.rho,
                self.zeta + 1.0
            )));
        }
        if self.epsilon(self.i0) >= 1.0 {
            return Err(bad(format!("ε at i0 = {} is not below 1", self.i0)));
        }
        Ok(())
    }

    pub fn epsilon(&self, i: usize) -> f64 {
        epsilon_schedule(self.k, self.rho, i)
    }

    /// Prefactor of the subtracted-mass series, `2 (i0 − 1)^ρ`.
    pub fn k1(&self) -> f64 {
        2.0 * ((self.i0 - 1) as f64).powf(self.rho)
    }
}

/// `1 + A cos(2πu)` in the unit unstable coordinate of the base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseDensity {
    pub amplitude: f64,
}

impl BaseDensity {
    pub fn new(amplitude: f64) -> Result<Self> {
        if !(amplitude.abs() < 1.0) {
            return Err(bad(format!(
                "density amplitude must lie in (−1,1), got {amplitude}"
            )));
        }
        Ok(BaseDensity { amplitude })
    }

    pub fn eval(&self, u: f64) -> f64 {
        1.0 + self.amplitude * (2.0 * PI * u).cos()
    }

    /// Mass of `[u0, u1]`.
    pub fn integral(&self, u0: f64, u1: f64) -> f64 {
        u1 - u0 + self.amplitude / (2.0 * PI) * ((2.0 * PI * u1).sin() - (2.0 * PI * u0).sin())
    }

    pub fn sample(&self, m: &HyperbolicModel, rng: &mut impl Rng) -> Point2 {
        let r = &m.cells[BASE_CELL];
        let top = 1.0 + self.amplitude.abs();
        loop {
            let u: f64 = rng.gen();
            if rng.gen::<f64>() * top <= self.eval(u) {
                return Point2::new(BASE_CELL, r.u.0 + u * r.width(), r.center().1);
            }
        }
    }
}

/// One coordinate of the pair, advanced return by return.
struct Walker<'a> {
    tower: Tower<'a>,
    base: Point2,
    ret: Return,
    /// Time at which the coordinate sat at level 0 over `base`.
    origin: i64,
    itinerary: Option<Vec<u32>>,
}

impl<'a> Walker<'a> {
    fn new(tower: Tower<'a>, p: &TowerPoint, record: bool) -> Result<Self> {
        let mut w = Walker {
            tower,
            base: p.base,
            ret: p.ret,
            origin: -(p.level as i64),
            itinerary: None,
        };
        if record {
            if p.level != 0 {
                return Err(Error::Domain(
                    "itineraries are recorded from level 0".into(),
                ));
            }
            let rec = return_time(p.base, tower.model, tower.table, tower.cap)?;
            w.itinerary = Some(rec.itinerary);
        }
        Ok(w)
    }

    fn advance(&mut self, t: i64) -> Result<()> {
        while self.origin + self.ret.r as i64 <= t {
            self.origin += self.ret.r as i64;
            self.base = self.ret.endpoint;
            let (m, table, cap) = (self.tower.model, self.tower.table, self.tower.cap);
            self.ret = match self.itinerary.as_mut() {
                Some(it) => {
                    let rec = return_time(self.base, m, table, cap)?;
                    it.extend_from_slice(&rec.itinerary);
                    rec.summary
                }
                None => first_return(self.base, m, table, cap)?,
            };
        }
        Ok(())
    }

    /// First time `≥ t` at level 0.
    fn next_base(&mut self, t: i64) -> Result<i64> {
        self.advance(t)?;
        Ok(if self.origin == t {
            t
        } else {
            self.origin + self.ret.r as i64
        })
    }

    fn at_base(&mut self, t: i64) -> Result<bool> {
        self.advance(t)?;
        Ok(self.origin == t)
    }
}

/// Runs the alternating recursion from `start`, where both coordinates sit
/// in the base (or at the initial tower points when `start = 0`). Returns
/// the stopping times up to the first simultaneous return, or `None` when a
/// stopping time passes `limit`.
fn simultaneous_return(
    w: &mut [Walker<'_>; 2],
    start: u64,
    lag: u64,
    limit: u64,
) -> Result<Option<Vec<u64>>> {
    let mut tau = start as i64;
    let mut taus = Vec::new();
    for k in 0.. {
        let d = k % 2;
        let next = w[d].next_base(tau + lag as i64)?;
        if next as u64 > limit {
            return Ok(None);
        }
        tau = next;
        taus.push(tau as u64);
        if taus.len() >= 2 && w[1 - d].at_base(tau)? {
            return Ok(Some(taus));
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTimes {
    /// `τ_1, τ_2, …` up to and including `T`.
    pub taus: Vec<u64>,
    pub t: u64,
}

/// Stopping times of the pair `(x, x′)`: `τ_{i+1}` is the first time from
/// `τ_i + lag` at which the coordinate on turn (`x` for odd `i+1`, `x′` for
/// even) is in the base; `T` is the first `τ_i`, `i ≥ 2`, with both there.
pub fn stopping_times(
    tower: Tower<'_>,
    x: &TowerPoint,
    y: &TowerPoint,
    lag: u64,
    cap: u64,
) -> Result<StoppingTimes> {
    if lag == 0 {
        return Err(bad("lag must be positive".into()));
    }
    let mut w = [Walker::new(tower, x, false)?, Walker::new(tower, y, false)?];
    let taus = simultaneous_return(&mut w, 0, lag, cap)?.ok_or(Error::CapExceeded(cap))?;
    let t = *taus.last().unwrap();
    Ok(StoppingTimes { taus, t })
}

/// Simultaneous-return statistics of an ensemble of pairs started in the
/// base from two densities.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTimes {
    pub pairs: u64,
    pub horizon: u64,
    /// `increments[i]`: law of `T_{i+1} − T_i`; `increments[0]` is `T`.
    pub increments: Vec<ReturnHistogram>,
    /// `occupancy[i − 1][n]`: pairs with `T_i ≤ n < T_{i+1}`, `n ≤ horizon`.
    pub occupancy: Vec<Vec<u64>>,
}

impl CouplingTimes {
    pub fn first(&self) -> &ReturnHistogram {
        &self.increments[0]
    }

    /// Empirical `P{T > n}`.
    pub fn survival(&self, n: u64) -> f64 {
        self.first().exceeding(n) as f64 / self.pairs as f64
    }

    /// Empirical `Σ_{i≥1} i^{−ρ} P{T_i ≤ n < T_{i+1}}`.
    pub fn weighted_occupancy(&self, rho: f64, n: u64) -> f64 {
        self.occupancy
            .iter()
            .enumerate()
            .map(|(i, occ)| {
                occ.get(n as usize).copied().unwrap_or(0) as f64 * ((i + 1) as f64).powf(-rho)
            })
            .sum::<f64>()
            / self.pairs as f64
    }

    fn merge(&mut self, o: CouplingTimes) {
        self.pairs += o.pairs;
        for (a, b) in self.increments.iter_mut().zip(&o.increments) {
            a.merge(b);
        }
        if self.occupancy.len() < o.occupancy.len() {
            self.occupancy
                .resize(o.occupancy.len(), vec![0; self.horizon as usize + 1]);
        }
        for (a, b) in self.occupancy.iter_mut().zip(o.occupancy) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimesConfig {
    pub pairs: usize,
    /// Last `n` for which occupancies are recorded.
    pub horizon: u64,
    /// Censoring point for one increment.
    pub cap: u64,
    /// Leading increments recorded, at most [`INCREMENTS`].
    pub increments: usize,
    pub seed: u64,
}

/// Samples pairs from `first × second` on the base and records every `T_i`
/// up to the horizon and the leading increments.
pub fn sample_coupling_times(
    tower: Tower<'_>,
    densities: [BaseDensity; 2],
    lag: u64,
    cfg: &TimesConfig,
) -> Result<CouplingTimes> {
    if cfg.pairs == 0 {
        return Err(bad("need at least one pair".into()));
    }
    if cfg.increments == 0 || cfg.increments > INCREMENTS {
        return Err(bad(format!(
            "between 1 and {INCREMENTS} increments are tracked, got {}",
            cfg.increments
        )));
    }
    if cfg.cap < cfg.horizon {
        return Err(bad(format!(
            "increment cap {} is below the horizon {}",
            cfg.cap, cfg.horizon
        )));
    }
    let width = cfg.horizon as usize + 1;
    let chunks = par_chunks(
        cfg.seed,
        cfg.pairs,
        1024,
        |rng, _, len| -> Result<CouplingTimes> {
            let mut diffs: Vec<Vec<i64>> = Vec::new();
            let mut increments = vec![ReturnHistogram::new(cfg.cap); cfg.increments];
            for _ in 0..len {
                let x = tower.point(densities[0].sample(tower.model, rng), 0)?;
                let y = tower.point(densities[1].sample(tower.model, rng), 0)?;
                let mut w = [
                    Walker::new(tower, &x, false)?,
                    Walker::new(tower, &y, false)?,
                ];
                let mut prev = 0u64;
                for i in 0.. {
                    if i >= cfg.increments && prev > cfg.horizon {
                        break;
                    }
                    let next = simultaneous_return(&mut w, prev, lag, prev + cfg.cap)?
                        .map(|t| *t.last().unwrap());
                    if let Some(h) = increments.get_mut(i) {
                        match next {
                            Some(t) => h.record(t - prev),
                            None => h.censored += 1,
                        }
                    }
                    // Occupancy of [T_i, T_{i+1}) for i ≥ 1.
                    if i >= 1 && prev <= cfg.horizon {
                        if diffs.len() < i {
                            diffs.resize(i, vec![0; width + 1]);
                        }
                        let end = next.map_or(width, |t| (t as usize).min(width));
                        diffs[i - 1][prev as usize] += 1;
                        diffs[i - 1][end] -= 1;
                    }
                    match next {
                        Some(t) => prev = t,
                        None => break,
                    }
                }
            }
            let occupancy = diffs
                .into_iter()
                .map(|d| {
                    let mut acc = 0i64;
                    d[..width]
                        .iter()
                        .map(|&v| {
                            acc += v;
                            acc as u64
                        })
                        .collect()
                })
                .collect();
            Ok(CouplingTimes {
                pairs: len as u64,
                horizon: cfg.horizon,
                increments,
                occupancy,
            })
        },
    );
    let mut out = CouplingTimes {
        pairs: 0,
        horizon: cfg.horizon,
        increments: vec![ReturnHistogram::new(cfg.cap); cfg.increments],
        occupancy: Vec::new(),
    };
    for c in chunks {
        out.merge(c?);
    }
    Ok(out)
}

/// Grid on one product cylinder of matched return blocks.
///
/// Coordinate grids are preimages of the midpoints of `points` uniform base
/// bins, so `F̂^stage` sends grid point `(j, j′)` to the bin pair `(j, j′)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub first: usize,
    pub stage: usize,
    pub points: usize,
    /// Base density at each grid point, per coordinate.
    density: [Vec<f64>; 2],
    /// `log JF^{T_k}` at each grid point for `k = first..=stage`, per coordinate.
    log_jac: [Vec<Vec<f64>>; 2],
}

impl CellGrid {
    /// Pulls uniform base bins back through `itineraries` (branch indices
    /// from time 0). `times[k − first]` is the absolute time `T_k`.
    pub fn pull_back(
        m: &HyperbolicModel,
        itineraries: [&[u32]; 2],
        times: &[u64],
        first: usize,
        points: usize,
        densities: [BaseDensity; 2],
    ) -> Result<Self> {
        if times.is_empty() || points == 0 {
            return Err(bad(
                "a cylinder grid needs a stage and at least one point".into()
            ));
        }
        let end = *times.last().unwrap() as usize;
        let base = m.cells[BASE_CELL];
        let mut density = [Vec::with_capacity(points), Vec::with_capacity(points)];
        let mut log_jac = [
            vec![vec![0.0; points]; times.len()],
            vec![vec![0.0; points]; times.len()],
        ];
        for c in 0..2 {
            let it = itineraries[c];
            if it.len() < end {
                return Err(Error::ShapeMismatch {
                    expected: end,
                    got: it.len(),
                });
            }
            let mut logd = vec![0.0; end];
            for j in 0..points {
                let mut a = base.u.0 + (j as f64 + 0.5) / points as f64 * base.width();
                for t in (0..end).rev() {
                    let (pre, d) = m.unstable_preimage(it[t] as usize, a)?;
                    logd[t] = d.ln();
                    a = pre;
                }
                density[c].push(densities[c].eval((a - base.u.0) / base.width()));
                let (mut acc, mut t) = (0.0, 0usize);
                for (k, &tk) in times.iter().enumerate() {
                    while t < tk as usize {
                        acc += logd[t];
                        t += 1;
                    }
                    log_jac[c][k][j] = acc;
                }
            }
        }
        Ok(CellGrid {
            first,
            stage: first + times.len() - 1,
            points,
            density,
            log_jac,
        })
    }

    /// Grid with prescribed values, for exercising the recursion directly.
    pub fn from_parts(
        first: usize,
        density: [Vec<f64>; 2],
        log_jac: [Vec<Vec<f64>>; 2],
    ) -> Result<Self> {
        let points = density[0].len();
        let stages = log_jac[0].len();
        let consistent = density[1].len() == points
            && stages > 0
            && log_jac[1].len() == stages
            && log_jac.iter().flatten().all(|v| v.len() == points);
        if !consistent || points == 0 {
            return Err(Error::ShapeMismatch {
                expected: points,
                got: density[1].len(),
            });
        }
        Ok(CellGrid {
            first,
            stage: first + stages - 1,
            points,
            density,
            log_jac,
        })
    }

    fn log_jac_at(&self, k: usize, jx: usize, jy: usize) -> f64 {
        self.log_jac[0][k - self.first][jx] + self.log_jac[1][k - self.first][jy]
    }
}

/// Density after the last completed subtraction on the current cylinder.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingState {
    /// Last completed stage; `i0 − 1` before any subtraction.
    pub stage: usize,
    /// `Φ̂_stage / JF̂^stage` on the cylinder grid, relative to the stage reference.
    pub phi_hat: Vec<f64>,
    /// Per completed stage: the subtracted level (relative) and its log-Jacobian reference.
    pub history: Vec<(f64, f64)>,
    /// Per completed stage: fraction of the cylinder's remaining mass removed.
    pub removed: Vec<f64>,
}

impl CouplingState {
    pub fn initial(cfg: &CouplingConfig) -> Self {
        CouplingState {
            stage: cfg.i0 - 1,
            phi_hat: Vec::new(),
            history: Vec::new(),
            removed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioCheck {
    pub ratio: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Max/min of `Φ̂_{i−1}/JF̂ⁱ` over one cylinder against `e^K`.
pub fn ratio_bound_check(values: &[f64], cfg: &CouplingConfig) -> RatioCheck {
    let (lo, hi) = values.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let ratio = if values.is_empty() { 1.0 } else { hi / lo };
    let bound = cfg.k.exp();
    RatioCheck {
        ratio,
        bound,
        ok: ratio <= bound * (1.0 + RATIO_SLACK),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub stage: usize,
    pub epsilon: f64,
    pub ratio: RatioCheck,
    /// `max Φ̂_i/Φ̂_{i−1}` over the grid.
    pub max_decrease: f64,
    /// `((i−1)/i)^ρ`.
    pub decrease_bound: f64,
    /// Largest gap between the two marginals of the removed mass, relative to it.
    pub marginal_residual: f64,
}

impl StepReport {
    pub fn decrease_ok(&self) -> bool {
        self.max_decrease <= self.decrease_bound
    }
}

/// One subtraction: on the cylinder of stage `i = state.stage + 1`, removes
/// `ε_i · min(Φ̂_{i−1}/JF̂ⁱ)` in pushed coordinates.
pub fn density_step(
    state: &CouplingState,
    cfg: &CouplingConfig,
    cell: &CellGrid,
) -> Result<(CouplingState, StepReport)> {
    let i = state.stage + 1;
    if cell.stage != i || i < cfg.i0 || cell.first > cfg.i0 || state.history.len() != i - cfg.i0 {
        return Err(Error::Domain(format!(
            "cylinder grid for stage {} does not continue stage {}",
            cell.stage, state.stage
        )));
    }
    let g = cell.points;
    let reference = cell.log_jac_at(i, 0, 0);
    let mut q = Vec::with_capacity(g * g);
    for jx in 0..g {
        for jy in 0..g {
            let phi = cell.density[0][jx] * cell.density[1][jy];
            if !(phi > 0.0) {
                return Err(Error::NegativeDensity {
                    cell: jx * g + jy,
                    value: phi,
                });
            }
            let mut bracket = phi;
            for (k, &(level, refk)) in state.history.iter().enumerate() {
                let stage = cfg.i0 + k;
                bracket -=
                    cfg.epsilon(stage) * level * (cell.log_jac_at(stage, jx, jy) - refk).exp();
            }
            if !(bracket > 0.0) {
                return Err(Error::NegativeDensity {
                    cell: jx * g + jy,
                    value: bracket,
                });
            }
            q.push((reference - cell.log_jac_at(i, jx, jy)).exp() * bracket);
        }
    }
    let ratio = ratio_bound_check(&q, cfg);
    let level = q.iter().copied().fold(f64::INFINITY, f64::min);
    let eps = cfg.epsilon(i);
    let cut = eps * level;
    let mut next = Vec::with_capacity(q.len());
    let mut max_decrease = 0.0f64;
    let (mut rows, mut cols) = (vec![0.0; g], vec![0.0; g]);
    for (idx, &v) in q.iter().enumerate() {
        let after = v - cut;
        if after < 0.0 {
            return Err(Error::NegativeDensity {
                cell: idx,
                value: after,
            });
        }
        max_decrease = max_decrease.max(after / v);
        // Pushed cell masses share the factor |bin|², dropped here.
        let removed = v - after;
        rows[idx / g] += removed;
        cols[idx % g] += removed;
        next.push(after);
    }
    let total: f64 = rows.iter().sum();
    let marginal_residual = rows
        .iter()
        .zip(&cols)
        .map(|(r, c)| (r - c).abs())
        .fold(0.0, f64::max)
        / total;
    let before: f64 = q.iter().sum();
    let mut history = state.history.clone();
    history.push((level, reference));
    let mut removed = state.removed.clone();
    removed.push(total / before);
    let report = StepReport {
        stage: i,
        epsilon: eps,
        ratio,
        max_decrease,
        decrease_bound: decrease_factor(cfg.rho, i),
        marginal_residual,
    };
    Ok((
        CouplingState {
            stage: i,
            phi_hat: next,
            history,
            removed,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub cells: usize,
    pub worst_ratio: f64,
    pub ratio_violations: usize,
    pub worst_decrease_margin: f64,
    pub decrease_violations: usize,
    pub worst_marginal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRun {
    pub stages: Vec<StageSummary>,
    pub samples: usize,
    /// Pairs whose cylinders were longer than the pull-back budget.
    pub skipped: usize,
    /// First overshoot met, as `(stage, error)`.
    pub negative: Option<(usize, Error)>,
}

impl CellRun {
    pub fn all_decrease(&self) -> bool {
        self.negative.is_none() && self.stages.iter().all(|s| s.decrease_violations == 0)
    }

    pub fn worst_marginal_residual(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| s.worst_marginal_residual)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct CellConfig {
    pub samples: usize,
    /// Subtracting stages per sample, starting at `i0`.
    pub stages: usize,
    /// Grid points per coordinate.
    pub points: usize,
    /// Longest itinerary pulled back; longer samples are skipped.
    pub max_time: u64,
    pub seed: u64,
}

/// Runs the recursion on the cylinders met by sampled pairs.
pub fn run_cells(
    tower: Tower<'_>,
    cfg: &CouplingConfig,
    densities: [BaseDensity; 2],
    cells: &CellConfig,
) -> Result<CellRun> {
    if cells.stages == 0 || cells.samples == 0 || cells.points == 0 {
        return Err(bad(
            "cylinder runs need samples, stages and grid points".into()
        ));
    }
    let last = cfg.i0 + cells.stages - 1;
    type Outcome = (Vec<StepReport>, Option<(usize, Error)>, bool);
    let per_sample: Vec<Result<Outcome>> =
        par_chunks(cells.seed, cells.samples, 4, |rng, _, len| {
            (0..len)
                .map(|_| {
                    let x = tower.point(densities[0].sample(tower.model, rng), 0)?;
                    let y = tower.point(densities[1].sample(tower.model, rng), 0)?;
                    let mut w = [Walker::new(tower, &x, true)?, Walker::new(tower, &y, true)?];
                    let mut times = Vec::with_capacity(last);
                    let mut prev = 0;
                    for _ in 0..last {
                        match simultaneous_return(&mut w, prev, cfg.lag, cells.max_time)? {
                            Some(t) => prev = *t.last().unwrap(),
                            None => return Ok((Vec::new(), None, true)),
                        }
                        times.push(prev);
                    }
                    let itins = [
                        w[0].itinerary.take().unwrap(),
                        w[1].itinerary.take().unwrap(),
                    ];
                    let mut state = CouplingState::initial(cfg);
                    let mut reports = Vec::with_capacity(cells.stages);
                    for i in cfg.i0..=last {
                        let grid = CellGrid::pull_back(
                            tower.model,
                            [&itins[0], &itins[1]],
                            &times[cfg.i0 - 1..i],
                            cfg.i0,
                            cells.points,
                            densities,
                        )?;
                        match density_step(&state, cfg, &grid) {
                            Ok((s, r)) => {
                                state = s;
                                reports.push(r);
                            }
                            Err(e @ Error::NegativeDensity { .. }) => {
                                return Ok((reports, Some((i, e)), false))
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    Ok((reports, None, false))
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();

    let mut stages: Vec<StageSummary> = (0..cells.stages)
        .map(|k| StageSummary {
            stage: cfg.i0 + k,
            cells: 0,
            worst_ratio: 1.0,
            ratio_violations: 0,
            worst_decrease_margin: f64::NEG_INFINITY,
            decrease_violations: 0,
            worst_marginal_residual: 0.0,
        })
        .collect();
    let (mut skipped, mut negative) = (0, None);
    for outcome in per_sample {
        let (reports, neg, skip) = outcome?;
        skipped += skip as usize;
        if negative.is_none() {
            negative = neg;
        }
        for (s, r) in stages.iter_mut().zip(&reports) {
            s.cells += 1;
            s.worst_ratio = s.worst_ratio.max(r.ratio.ratio);
            s.ratio_violations += !r.ratio.ok as usize;
            s.worst_decrease_margin = s
                .worst_decrease_margin
                .max(r.max_decrease - r.decrease_bound);
            s.decrease_violations += !r.decrease_ok() as usize;
            s.worst_marginal_residual = s.worst_marginal_residual.max(r.marginal_residual);
        }
    }
    Ok(CellRun {
        stages,
        samples: cells.samples,
        skipped,
        negative,
    })
}

/// Raises `cfg.i0` from its value until the ratio budget holds on every
/// sampled cylinder of the first subtracting stage.
pub fn select_i0(
    tower: Tower<'_>,
    cfg: &CouplingConfig,
    densities: [BaseDensity; 2],
    cells: &CellConfig,
    max_tries: usize,
) -> Result<CouplingConfig> {
    let mut c = cfg.clone();
    let probe = CellConfig {
        stages: 1,
        ..cells.clone()
    };
    for _ in 0..max_tries {
        let run = run_cells(tower, &c, densities, &probe)?;
        if run.negative.is_none() && run.stages[0].ratio_violations == 0 {
            return Ok(c);
        }
        c.i0 += 1;
    }
    Err(Error::Convergence(format!(
        "ratio budget still violated at i0 = {}",
        c.i0
    )))
}

/// Distribution of a base density over the base states of a chain.
pub fn base_distribution(p: &TransferMatrix, density: BaseDensity) -> Result<Vec<f64>> {
    let bins = p.bins as f64;
    let mut v: Vec<f64> = p
        .states
        .iter()
        .map(|s| match *s {
            TowerState::Level { level: 0, bin } => {
                density.integral(bin as f64 / bins, (bin + 1) as f64 / bins)
            }
            TowerState::Cell { cell, bin } if cell as usize == BASE_CELL => {
                density.integral(bin as f64 / bins, (bin + 1) as f64 / bins)
            }
            _ => 0.0,
        })
        .collect();
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSupport("chain has no base states".into()));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

/// `Σ|λPⁿ − λ′Pⁿ|` at each `n` of `ns` (ascending).
pub fn direct_tv(
    p: &TransferMatrix,
    first: &[f64],
    second: &[f64],
    ns: &[u64],
) -> Result<Vec<f64>> {
    if first.len() != p.len() || second.len() != p.len() {
        return Err(Error::ShapeMismatch {
            expected: p.len(),
            got: first.len().min(second.len()),
        });
    }
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("times must be ascending".into()));
    }
    let (mut a, mut b) = (first.to_vec(), second.to_vec());
    let mut t = 0;
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        while t < n {
            a = p.push(&a);
            b = p.push(&b);
            t += 1;
        }
        out.push(a.par_iter().zip(&b).map(|(x, y)| (x - y).abs()).sum());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBound {
    pub n: Vec<u64>,
    pub direct_tv: Vec<f64>,
    pub bound: Vec<f64>,
    pub p_t_gt_n: Vec<f64>,
    pub k1: f64,
    /// `direct ≤ bound·(1 + tolerance)` at every `n`.
    pub holds: bool,
}

/// Compares the direct distance with `2P{T>n} + k₁ Σ i^{−ρ} P{T_i ≤ n < T_{i+1}}`.
pub fn coupling_bound(
    cfg: &CouplingConfig,
    times: &CouplingTimes,
    ns: &[u64],
    direct: &[f64],
    tolerance: f64,
) -> Result<CouplingBound> {
    if !(cfg.rho > cfg.zeta + 1.0) {
        return Err(bad(format!(
            "ρ = {} must exceed ζ + 1 = {}",
            cfg.rho,
            cfg.zeta + 1.0
        )));
    }
    if ns.len() != direct.len() {
        return Err(Error::ShapeMismatch {
            expected: ns.len(),
            got: direct.len(),
        });
    }
    if let Some(&n) = ns.iter().find(|&&n| n > times.horizon) {
        return Err(Error::Domain(format!(
            "n = {n} is past the sampled horizon {}",
            times.horizon
        )));
    }
    let k1 = cfg.k1();
    let p_t_gt_n: Vec<f64> = ns.iter().map(|&n| times.survival(n)).collect();
    let bound: Vec<f64> = ns
        .iter()
        .zip(&p_t_gt_n)
        .map(|(&n, &p)| 2.0 * p + k1 * times.weighted_occupancy(cfg.rho, n))
        .collect();
    let holds = direct
        .iter()
        .zip(&bound)
        .all(|(&d, &b)| d <= b * (1.0 + tolerance));
    Ok(CouplingBound {
        n: ns.to_vec(),
        direct_tv: direct.to_vec(),
        bound,
        p_t_gt_n,
        k1,
        holds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementReport {
    /// Per `i`: fitted `k₂`, or `None` when skipped.
    pub k2: Vec<Option<f64>>,
    pub notes: Vec<String>,
}

/// Fits `k₂ = max_n P{T_{i+1}−T_i > n} / P{T > n}` over `window`, where the
/// reference survival has at least `min_tail` exceedances.
pub fn increment_domination_check(
    increments: &[ReturnHistogram],
    window: (u64, u64),
    min_samples: u64,
    min_tail: u64,
) -> Result<IncrementReport> {
    let reference = increments
        .first()
        .ok_or_else(|| Error::InsufficientSamples("no increments".into()))?;
    let ref_total = reference.total();
    if ref_total < min_samples {
        return Err(Error::InsufficientSamples(format!(
            "{ref_total} samples of T, need {min_samples}"
        )));
    }
    let mut k2 = Vec::with_capacity(increments.len());
    let mut notes = Vec::new();
    for (i, h) in increments.iter().enumerate() {
        let total = h.total();
        if total == 0 {
            notes.push(format!("increment {i}: no samples, skipped"));
            k2.push(None);
            continue;
        }
        if total < min_samples {
            return Err(Error::InsufficientSamples(format!(
                "increment {i}: {total} samples, need {min_samples}"
            )));
        }
        let worst = (window.0..=window.1)
            .filter(|&n| reference.exceeding(n) >= min_tail)
            .map(|n| {
                let p = h.exceeding(n) as f64 / total as f64;
                p / (reference.exceeding(n) as f64 / ref_total as f64)
            })
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
        if worst.is_none() {
            notes.push(format!(
                "increment {i}: reference tail too thin on the window, skipped"
            ));
        }
        k2.push(worst);
    }
    Ok(IncrementReport { k2, notes })
}
