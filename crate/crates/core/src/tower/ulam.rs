//! Piecewise-constant discretizations of the quotient dynamics.
//!
//! The tower schemes use states `(level, bin)` where the bin is a uniform cell
//! of the unstable coordinate of the base; a state holds the base points of
//! that bin still climbing at that level. Levels from `max_level` on are pooled
//! into one censored state whose exit time is treated as geometric with the
//! observed mean excess. The neutral-partition scheme lives in `markov.rs`.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ConfigIssue, Error, Result};
use crate::model::{BranchKind, HyperbolicModel, Point2};
use crate::observables::Observable;
use crate::returns::{first_return, first_return_visit, LevelTable, BASE_CELL};
use crate::rng::stream;

const NONE: u32 = u32::MAX;
const MIN_BINS: usize = 64;

#[derive(Debug, Clone)]
pub struct UlamGrid {
    pub bins: usize,
    pub max_level: usize,
    /// Test points per bin for sampling schemes.
    pub points_per_bin: usize,
    pub seed: u64,
    pub cap: u64,
    /// Uniform bins on each exit strip of `W0` (neutral-partition scheme).
    pub exit_bins: usize,
    /// Sub-bins per level set below the exit strips; must divide `exit_bins`.
    pub neutral_bins: usize,
}

impl Default for UlamGrid {
    fn default() -> Self {
        UlamGrid {
            bins: 64,
            max_level: 2000,
            points_per_bin: 100_000,
            seed: 0,
            cap: crate::returns::DEFAULT_CAP,
            exit_bins: 256,
            neutral_bins: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TowerState {
    /// Base points of `bin` still climbing at `level`.
    Level {
        level: u32,
        bin: u32,
    },
    /// Unstable bin of a cell outside the neutral level sets; cell 0 bins are
    /// the exit strips of `W0`, left strip first.
    Cell {
        cell: u32,
        bin: u32,
    },
    /// Sub-bin of the level set `J_depth` (or `J′_depth` when `left`).
    Neutral {
        left: bool,
        depth: u32,
        bin: u32,
    },
    Censored,
}

impl std::fmt::Display for TowerState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TowerState::Level { level, bin } => write!(f, "L{level}:B{bin}"),
            TowerState::Cell { cell, bin } => write!(f, "C{cell}:B{bin}"),
            TowerState::Neutral { left, depth, bin } => {
                write!(f, "J{}{depth}:B{bin}", if *left { "'" } else { "" })
            }
            TowerState::Censored => write!(f, "censored"),
        }
    }
}

/// Sparse row-stochastic matrix over tower states.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub states: Vec<TowerState>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub probs: Vec<f64>,
    /// Mean `log JF̄` of the points behind each entry (0 when climbing).
    pub log_jac: Vec<f64>,
    /// Reference measure of each state.
    pub mass: Vec<f64>,
    pub bins: usize,
    pub max_level: usize,
    index: Vec<u32>,
    censored: Option<usize>,
    col_ptr: Vec<usize>,
    col_rows: Vec<u32>,
    col_probs: Vec<f64>,
}

impl TransferMatrix {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_index(&self, level: usize, bin: usize) -> Option<usize> {
        if level >= self.max_level || bin >= self.bins {
            return None;
        }
        match self.index.get(level * self.bins + bin) {
            None | Some(&NONE) => None,
            Some(&i) => Some(i as usize),
        }
    }

    pub fn censored_index(&self) -> Option<usize> {
        self.censored
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k] as usize, self.probs[k]))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.probs[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .sum()
    }

    pub fn max_row_defect(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.row_sum(i) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `(P f)(s) = Σ_t P(s,t) f(t)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.probs[k] * f[self.cols[k] as usize])
                    .sum()
            })
            .collect()
    }

    /// `(v P)(t) = Σ_s v(s) P(s,t)`, summed in a fixed order per column.
    pub fn push(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|j| {
                (self.col_ptr[j]..self.col_ptr[j + 1])
                    .map(|k| v[self.col_rows[k] as usize] * self.col_probs[k])
                    .sum()
            })
            .collect()
    }

    /// `(row, col, prob)` triplets in row order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).flat_map(move |i| self.row(i).map(move |(j, p)| (i, j, p)))
    }

    /// Checks that every move climbs one level in its bin or lands on level 0;
    /// on a neutral partition, that level sets only descend by one in place.
    pub fn respects_tower_structure(&self) -> bool {
        use TowerState::*;
        self.triplets()
            .all(|(i, j, _)| match (self.states[i], self.states[j]) {
                (Level { .. } | Censored, Level { level: 0, .. }) => true,
                (Level { level, bin }, Level { level: l2, bin: b2 }) => {
                    l2 == level + 1 && b2 == bin
                }
                (Level { level, .. }, Censored) => level as usize + 1 == self.max_level,
                (Cell { .. }, Cell { .. } | Neutral { .. } | Censored) => true,
                (Neutral { depth: 1, .. }, Cell { cell: 0, .. }) => true,
                (
                    Neutral { left, depth, bin },
                    Neutral {
                        left: l2,
                        depth: d2,
                        bin: b2,
                    },
                ) => l2 == left && d2 + 1 == depth && b2 == bin,
                (Censored, Neutral { depth, .. }) => depth as usize == self.max_level,
                (Censored, Censored) => true,
                _ => false,
            })
    }

    /// Builds the CSR form from per-row `(col, prob, log_jac)` lists, checking
    /// that each row sums to 1 within `1e-8` and renormalizing it exactly.
    pub(super) fn from_rows(
        states: Vec<TowerState>,
        rows: Vec<Vec<(usize, f64, f64)>>,
        mass: Vec<f64>,
        bins: usize,
        max_level: usize,
        index: Vec<u32>,
    ) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(|r| r.len()).sum();
        let (mut cols, mut probs, mut log_jac) = (
            Vec::with_capacity(nnz),
            Vec::with_capacity(nnz),
            Vec::with_capacity(nnz),
        );
        for (i, mut entries) in rows.into_iter().enumerate() {
            entries.sort_by_key(|e| e.0);
            let sum: f64 = entries.iter().map(|e| e.1).sum();
            if !((sum - 1.0).abs() <= 1e-8) {
                return Err(Error::MassLeak { row: i, sum });
            }
            // merge duplicate columns
            let mut k = 0;
            while k < entries.len() {
                let (j, mut p, mut pj) = (entries[k].0, entries[k].1, entries[k].1 * entries[k].2);
                k += 1;
                while k < entries.len() && entries[k].0 == j {
                    p += entries[k].1;
                    pj += entries[k].1 * entries[k].2;
                    k += 1;
                }
                cols.push(j as u32);
                probs.push(p / sum);
                log_jac.push(if p > 0.0 { pj / p } else { 0.0 });
            }
            row_ptr.push(cols.len());
        }
        let censored = states.iter().position(|s| *s == TowerState::Censored);
        let mut m = TransferMatrix {
            states,
            row_ptr,
            cols,
            probs,
            log_jac,
            mass,
            bins,
            max_level,
            index,
            censored,
            col_ptr: Vec::new(),
            col_rows: Vec::new(),
            col_probs: Vec::new(),
        };
        m.transpose();
        Ok(m)
    }

    fn transpose(&mut self) {
        let n = self.len();
        let mut counts = vec![0usize; n + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let mut fill = counts.clone();
        let mut rows = vec![0u32; self.cols.len()];
        let mut probs = vec![0.0; self.cols.len()];
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.cols[k] as usize;
                rows[fill[c]] = i as u32;
                probs[fill[c]] = self.probs[k];
                fill[c] += 1;
            }
        }
        self.col_ptr = counts;
        self.col_rows = rows;
        self.col_probs = probs;
    }
}

/// Statistics of the base points of one bin, in arbitrary mass units.
#[derive(Debug, Clone, Default)]
pub struct BinProfile {
    /// `alive[l]`: mass with `R > l`, for `l = 0..=max_level`.
    pub alive: Vec<f64>,
    /// `(R − 1, target bin) → (mass, Σ mass·log JF̄)` for `R ≤ max_level`.
    pub returns: BTreeMap<(u32, u32), (f64, f64)>,
    /// `Σ mass·(R − max_level)` over `R > max_level`.
    pub excess: f64,
    /// Target bin → mass, over `R > max_level`.
    pub exits: BTreeMap<u32, (f64, f64)>,
    /// Per observable: mass-weighted sums per level, then the censored sum.
    pub obs: Vec<Vec<f64>>,
    /// Conversion from the profile's units to Lebesgue measure.
    pub unit: f64,
    pub skipped: u64,
}

impl BinProfile {
    fn new(max_level: usize, observables: usize) -> Self {
        BinProfile {
            alive: vec![0.0; max_level + 1],
            obs: vec![vec![0.0; max_level + 1]; observables],
            ..Default::default()
        }
    }
}

/// A way of building the transfer matrix.
pub trait UlamScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn discretize(
        &self,
        m: &HyperbolicModel,
        table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Discretization>;
}

pub(super) fn check_grid(grid: &UlamGrid) -> Result<()> {
    if grid.bins < MIN_BINS {
        return Err(ConfigIssue::Parameter(format!(
            "need at least {MIN_BINS} bins, got {}",
            grid.bins
        ))
        .into());
    }
    if grid.max_level < 1 || grid.max_level >= NONE as usize / grid.bins {
        return Err(
            ConfigIssue::Parameter(format!("max_level {} out of range", grid.max_level)).into(),
        );
    }
    Ok(())
}

/// Jittered stratified test points on the reference leaf of each bin.
pub struct TestPoints;

impl UlamScheme for TestPoints {
    fn name(&self) -> &'static str {
        "test-points"
    }

    fn discretize(
        &self,
        m: &HyperbolicModel,
        table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Discretization> {
        check_grid(grid)?;
        assemble(
            grid,
            &self.profile(m, table, grid, observables)?,
            observables.len(),
        )
    }
}

impl TestPoints {
    pub fn profile(
        &self,
        m: &HyperbolicModel,
        table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Vec<BinProfile>> {
        let cell = &m.cells[BASE_CELL];
        let width = cell.width() / grid.bins as f64;
        let centre = cell.center().1;
        let big_l = grid.max_level;
        (0..grid.bins)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream(grid.seed, b as u64);
                let mut prof = BinProfile::new(big_l, observables.len());
                let mut hist = vec![0.0; big_l + 1];
                let lo = cell.u.0 + b as f64 * width;
                let n = grid.points_per_bin;
                let mut used = 0u64;
                for j in 0..n {
                    let a = lo + (j as f64 + rng.gen::<f64>()) / n as f64 * width;
                    let x = Point2::new(BASE_CELL, a, centre);
                    let ret = if observables.is_empty() {
                        first_return(x, m, table, grid.cap)
                    } else {
                        let obs = &mut prof.obs;
                        first_return_visit(x, m, table, grid.cap, &mut |t, y| {
                            let slot = (t as usize).min(big_l);
                            for (k, o) in observables.iter().enumerate() {
                                obs[k][slot] += o.eval(m, y);
                            }
                        })
                    };
                    let ret = match ret {
                        Ok(r) => r,
                        Err(Error::BoundaryTie { .. }) | Err(Error::CapExceeded(_)) => {
                            prof.skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    used += 1;
                    let target = target_bin(m, grid.bins, ret.endpoint.a);
                    let r = ret.r as usize;
                    if r <= big_l {
                        hist[r - 1] += 1.0;
                        let e = prof.returns.entry(((r - 1) as u32, target)).or_default();
                        e.0 += 1.0;
                        e.1 += ret.log_du;
                    } else {
                        hist[big_l] += 1.0;
                        prof.excess += (r - big_l) as f64;
                        let e = prof.exits.entry(target).or_default();
                        e.0 += 1.0;
                        e.1 += ret.log_du;
                    }
                }
                if used == 0 {
                    return Err(Error::InsufficientSamples(format!(
                        "no usable test point in bin {b}"
                    )));
                }
                // alive[l] = #{R > l}
                let mut acc = hist[big_l];
                prof.alive[big_l] = acc;
                for l in (0..big_l).rev() {
                    acc += hist[l];
                    prof.alive[l] = acc;
                }
                prof.unit = width / used as f64;
                Ok(prof)
            })
            .collect()
    }
}

fn target_bin(m: &HyperbolicModel, bins: usize, a: f64) -> u32 {
    let c = &m.cells[BASE_CELL];
    (((a - c.u.0) / c.width() * bins as f64) as usize).min(bins - 1) as u32
}

/// Exact propagation of bin intervals through affine branch endpoints.
///
/// Mass on a full crossing of a cell stays uniform under affine branches, so
/// each step carries full crossings as per-cell totals and only the partial
/// end pieces as explicit intervals. Rejects models with a nonlinear branch.
pub struct IntervalPropagation {
    /// Mass below which the censored tail is considered exhausted.
    pub tail_tol: f64,
}

impl Default for IntervalPropagation {
    fn default() -> Self {
        IntervalPropagation { tail_tol: 1e-15 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    cell: usize,
    lo: f64,
    hi: f64,
    /// Original measure per unit of current length.
    scale: f64,
    log_jac: f64,
}

impl UlamScheme for IntervalPropagation {
    fn name(&self) -> &'static str {
        "interval"
    }

    fn discretize(
        &self,
        m: &HyperbolicModel,
        table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Discretization> {
        check_grid(grid)?;
        assemble(grid, &self.profile(m, table, grid, observables)?, 0)
    }
}

impl IntervalPropagation {
    pub fn profile(
        &self,
        m: &HyperbolicModel,
        _table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Vec<BinProfile>> {
        if m.branches
            .iter()
            .any(|b| b.kind == BranchKind::Intermittent)
        {
            return Err(ConfigIssue::Parameter(
                "interval propagation needs an all-affine model".into(),
            )
            .into());
        }
        if !observables.is_empty() {
            return Err(ConfigIssue::Parameter(
                "interval propagation does not discretize observables".into(),
            )
            .into());
        }
        let base = m.cells[BASE_CELL];
        let width = base.width() / grid.bins as f64;
        (0..grid.bins)
            .into_par_iter()
            .map(|b| {
                let lo = base.u.0 + b as f64 * width;
                self.propagate(m, grid, lo, lo + width)
            })
            .collect()
    }
}

impl IntervalPropagation {
    fn propagate(
        &self,
        m: &HyperbolicModel,
        grid: &UlamGrid,
        lo: f64,
        hi: f64,
    ) -> Result<BinProfile> {
        let big_l = grid.max_level;
        let n0 = m.n0 as u64;
        let dim = m.dim();
        let mut prof = BinProfile::new(big_l, 0);
        prof.unit = 1.0;
        let mut pieces = vec![Piece {
            cell: BASE_CELL,
            lo,
            hi,
            scale: 1.0,
            log_jac: 0.0,
        }];
        // per cell: (mass, Σ mass·log_jac) spread uniformly over a full crossing
        let mut full = vec![(0.0f64, 0.0f64); dim];
        prof.alive[0] = hi - lo;
        let budget = (hi - lo) * self.tail_tol;
        let mut t = 0u64;
        loop {
            let mut next_pieces = Vec::new();
            let mut next_full = vec![(0.0, 0.0); dim];
            for p in &pieces {
                for &k in m.branches_from(p.cell) {
                    let br = &m.branches[k];
                    let (l, h) = (p.lo.max(br.u_lo), p.hi.min(br.u_hi));
                    if l >= h {
                        continue;
                    }
                    let slope = br.expansion(m);
                    let lj = p.log_jac + slope.ln();
                    if l <= br.u_lo && h >= br.u_hi {
                        let mass = (h - l) * p.scale;
                        next_full[br.target].0 += mass;
                        next_full[br.target].1 += mass * lj;
                    } else {
                        let tc = &m.cells[br.target];
                        let map =
                            |x: f64| tc.u.0 + (x - br.u_lo) / (br.u_hi - br.u_lo) * tc.width();
                        next_pieces.push(Piece {
                            cell: br.target,
                            lo: map(l),
                            hi: map(h),
                            scale: p.scale / slope,
                            log_jac: lj,
                        });
                    }
                }
            }
            for (c, &(mass, mj)) in full.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let w = m.cells[c].width();
                for &k in m.branches_from(c) {
                    let br = &m.branches[k];
                    let frac = (br.u_hi - br.u_lo) / w;
                    let slope = br.expansion(m).ln();
                    next_full[br.target].0 += mass * frac;
                    next_full[br.target].1 += (mj + mass * slope) * frac;
                }
            }
            t += 1;
            pieces = next_pieces;
            full = next_full;
            if t % n0 == 0 {
                let mut landed: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
                pieces.retain(|p| {
                    if p.cell != BASE_CELL {
                        return true;
                    }
                    spread_interval(m, grid.bins, p, &mut landed);
                    false
                });
                let (mass, mj) = std::mem::take(&mut full[BASE_CELL]);
                if mass > 0.0 {
                    let share = 1.0 / grid.bins as f64;
                    for tb in 0..grid.bins as u32 {
                        let e = landed.entry(tb).or_default();
                        e.0 += mass * share;
                        e.1 += mj * share;
                    }
                }
                for (tb, (mass, mj)) in landed {
                    if t as usize <= big_l {
                        let e = prof.returns.entry(((t - 1) as u32, tb)).or_default();
                        e.0 += mass;
                        e.1 += mj;
                    } else {
                        let e = prof.exits.entry(tb).or_default();
                        e.0 += mass;
                        e.1 += mj;
                        prof.excess += mass * (t as usize - big_l) as f64;
                    }
                }
            }
            let alive: f64 = pieces.iter().map(|p| (p.hi - p.lo) * p.scale).sum::<f64>()
                + full.iter().map(|f| f.0).sum::<f64>();
            if (t as usize) <= big_l {
                prof.alive[t as usize] = alive;
            } else if alive <= budget {
                // attribute the leftover to the last exit so row sums close
                prof.excess += alive * (t as usize + 1 - big_l) as f64;
                if let Some((_, e)) = prof.exits.iter_mut().next_back() {
                    e.0 += alive;
                }
                break;
            }
            if alive == 0.0 {
                break;
            }
            if t > grid.cap {
                return Err(Error::CapExceeded(grid.cap));
            }
        }
        Ok(prof)
    }
}

fn spread_interval(
    m: &HyperbolicModel,
    bins: usize,
    p: &Piece,
    out: &mut BTreeMap<u32, (f64, f64)>,
) {
    let c = &m.cells[BASE_CELL];
    let w = c.width() / bins as f64;
    let first = target_bin(m, bins, p.lo);
    let last = target_bin(m, bins, p.hi);
    for tb in first..=last {
        let blo = c.u.0 + tb as f64 * w;
        let overlap = (p.hi.min(blo + w) - p.lo.max(blo)).max(0.0);
        if overlap > 0.0 {
            let e = out.entry(tb).or_default();
            e.0 += overlap * p.scale;
            e.1 += overlap * p.scale * p.log_jac;
        }
    }
}

/// Name → scheme table.
pub struct UlamRegistry {
    schemes: Vec<Box<dyn UlamScheme>>,
}

impl Default for UlamRegistry {
    fn default() -> Self {
        UlamRegistry {
            schemes: vec![
                Box::new(TestPoints),
                Box::new(IntervalPropagation::default()),
                Box::new(super::markov::NeutralPartition),
            ],
        }
    }
}

impl UlamRegistry {
    pub fn register(&mut self, s: Box<dyn UlamScheme>) {
        self.schemes.retain(|x| x.name() != s.name());
        self.schemes.push(s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn UlamScheme> {
        self.schemes
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                ConfigIssue::Parameter(format!("unknown discretization scheme '{name}'")).into()
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.schemes.iter().map(|s| s.name()).collect()
    }
}

/// A transfer matrix with observables averaged over each state.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub matrix: TransferMatrix,
    pub observables: Vec<Vec<f64>>,
    /// Reference mass of the censored state over total reference mass.
    pub censored_fraction: f64,
    /// Fraction of base mass with `R > max_level`, or of `W0` below the
    /// deepest resolved level set.
    pub overflow_fraction: f64,
    pub skipped: u64,
}

pub fn ulam_discretize(
    m: &HyperbolicModel,
    table: &LevelTable,
    grid: &UlamGrid,
    scheme: &dyn UlamScheme,
    observables: &[&dyn Observable],
) -> Result<Discretization> {
    scheme.discretize(m, table, grid, observables)
}

fn assemble(grid: &UlamGrid, profiles: &[BinProfile], n_obs: usize) -> Result<Discretization> {
    let (bins, big_l) = (grid.bins, grid.max_level);
    let base_mass: f64 = profiles.iter().map(|p| p.alive[0] * p.unit).sum();
    let overflow: f64 = profiles
        .iter()
        .map(|p| p.alive[big_l] * p.unit)
        .sum::<f64>()
        / base_mass;
    if overflow > 1e-3 {
        return Err(ConfigIssue::Parameter(format!(
            "max_level {big_l} is below the 0.999 quantile of R (overflow {overflow:.2e})"
        ))
        .into());
    }

    let mut states = Vec::new();
    let mut index = vec![NONE; big_l * bins];
    for l in 0..big_l {
        for (b, p) in profiles.iter().enumerate() {
            if p.alive[l] > 0.0 {
                index[l * bins + b] = states.len() as u32;
                states.push(TowerState::Level {
                    level: l as u32,
                    bin: b as u32,
                });
            }
        }
    }
    let cens_mass: f64 = profiles.iter().map(|p| p.alive[big_l] * p.unit).sum();
    let censored = if cens_mass > 0.0 {
        states.push(TowerState::Censored);
        Some(states.len() - 1)
    } else {
        None
    };
    let level0 = |tb: u32| index[tb as usize] as usize;

    let mut rows = Vec::with_capacity(states.len());
    let mut mass = Vec::with_capacity(states.len());
    let mut observables = vec![Vec::with_capacity(states.len()); n_obs];
    // per-bin cursor into the ordered return map
    let mut cursors: Vec<_> = profiles
        .iter()
        .map(|p| p.returns.iter().peekable())
        .collect();

    for (i, s) in states.iter().enumerate() {
        let mut entries: Vec<(usize, f64, f64)> = Vec::new();
        match *s {
            TowerState::Level { level, bin } => {
                let (l, p) = (level as usize, &profiles[bin as usize]);
                let denom = p.alive[l];
                if p.alive[l + 1] > 0.0 {
                    let up = if l + 1 < big_l {
                        index[(l + 1) * bins + bin as usize] as usize
                    } else {
                        censored.unwrap()
                    };
                    entries.push((up, p.alive[l + 1] / denom, 0.0));
                }
                let cur = &mut cursors[bin as usize];
                while let Some(((_, tb), (w, wj))) = cur.next_if(|((lf, _), _)| *lf as usize == l) {
                    entries.push((level0(*tb), w / denom, wj / w));
                }
                mass.push(denom * p.unit);
                for (k, o) in observables.iter_mut().enumerate() {
                    o.push(p.obs[k][l] / denom);
                }
            }
            _ => {
                let excess: f64 = profiles.iter().map(|p| p.excess * p.unit).sum();
                let p_exit = cens_mass / excess;
                entries.push((i, 1.0 - p_exit, 0.0));
                let mut exits: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
                for p in profiles {
                    for (&tb, &(w, wj)) in &p.exits {
                        let e = exits.entry(tb).or_default();
                        e.0 += w * p.unit;
                        e.1 += wj * p.unit;
                    }
                }
                for (tb, (w, wj)) in exits {
                    entries.push((level0(tb), p_exit * w / cens_mass, wj / w));
                }
                mass.push(excess);
                for (k, o) in observables.iter_mut().enumerate() {
                    let sum: f64 = profiles.iter().map(|p| p.obs[k][big_l] * p.unit).sum();
                    o.push(sum / excess);
                }
            }
        }
        rows.push(entries);
    }

    let total: f64 = mass.iter().sum();
    let censored_fraction = censored.map_or(0.0, |c| mass[c] / total);
    let matrix = TransferMatrix::from_rows(states, rows, mass, bins, big_l, index)?;
    Ok(Discretization {
        matrix,
        observables,
        censored_fraction,
        overflow_fraction: overflow,
        skipped: profiles.iter().map(|p| p.skipped).sum(),
    })
}
