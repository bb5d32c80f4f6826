//! Stationary density of a transfer matrix.
//!
//! Power iteration from a flat start converges only polynomially when the
//! chain has polynomial tails. The states split into a base (level 0 of a
//! tower, or the bins outside the neutral level sets) and an acyclic remainder
//! whose only loop is the censored self-loop. The chain induced on the base
//! is solved first, its stationary vector is unfolded through the remainder
//! in topological order, and power iteration then polishes the result until
//! the residual is certified.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream;

use super::ulam::{TowerState, TransferMatrix};

const POLISH_CAP: usize = 10_000;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct InvariantDensity {
    pub rho: Vec<f64>,
    /// `‖ρP − ρ‖₁`.
    pub residual: f64,
    pub history: Vec<f64>,
    /// Least value of `ρ` over non-censored states.
    pub floor: f64,
    /// Least value of `ρ` relative to the reference mass, over non-censored states.
    pub relative_floor: f64,
    pub censored_mass: f64,
}

impl InvariantDensity {
    /// Density of `ρ` with respect to the normalized reference measure.
    pub fn relative(&self, p: &TransferMatrix) -> Vec<f64> {
        let total: f64 = p.mass.iter().sum();
        self.rho
            .iter()
            .zip(&p.mass)
            .map(|(r, m)| r / (m / total))
            .collect()
    }
}

fn l1_residual(p: &TransferMatrix, rho: &[f64]) -> f64 {
    p.push(rho)
        .iter()
        .zip(rho)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Stationary vector of a small dense stochastic matrix by the
/// Grassmann–Taksar–Heyman elimination.
pub fn stationary_dense(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    for k in (1..n).rev() {
        let s: f64 = a[k][..k].iter().sum();
        if s <= 0.0 {
            return Err(Error::DegenerateSupport(format!(
                "state {k} cannot reach lower states"
            )));
        }
        for i in 0..k {
            a[i][k] /= s;
        }
        for i in 0..k {
            let f = a[i][k];
            if f != 0.0 {
                for j in 0..k {
                    a[i][j] += f * a[k][j];
                }
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * a[i][k]).sum();
    }
    let total: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|x| x / total).collect())
}

const DENSE_LIMIT: usize = 512;
const INDUCED_TOL: f64 = 1e-15;
const INDUCED_CAP: usize = 200_000;

fn is_base(s: TowerState) -> bool {
    matches!(
        s,
        TowerState::Level { level: 0, .. } | TowerState::Cell { .. }
    )
}

/// Non-base states ordered so that every move between distinct non-base
/// states goes forward.
fn topological_order(p: &TransferMatrix, base_pos: &[u32]) -> Result<Vec<usize>> {
    let n = p.len();
    let mut indeg = vec![0u32; n];
    for i in (0..n).filter(|&i| base_pos[i] == NONE) {
        for (j, _) in p.row(i) {
            if j != i && base_pos[j] == NONE {
                indeg[j] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| base_pos[i] == NONE && indeg[i] == 0)
        .collect();
    let mut head = 0;
    while head < order.len() {
        let i = order[head];
        head += 1;
        for (j, _) in p.row(i) {
            if j != i && base_pos[j] == NONE {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    order.push(j);
                }
            }
        }
    }
    let remaining = base_pos.iter().filter(|&&b| b == NONE).count();
    if order.len() != remaining {
        return Err(Error::DegenerateSupport(
            "states outside the base form a cycle".into(),
        ));
    }
    Ok(order)
}

const NONE: u32 = u32::MAX;

/// Stationary vector of a sparse stochastic matrix that mixes geometrically,
/// by iterating the lazy chain `(I + K)/2`.
fn stationary_sparse(rows: &[Vec<(u32, f64)>]) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, r) in rows.iter().enumerate() {
        for &(j, q) in r {
            cols[j as usize].push((i as u32, q));
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..INDUCED_CAP {
        let next: Vec<f64> = cols
            .par_iter()
            .enumerate()
            .map(|(j, c)| {
                0.5 * pi[j] + 0.5 * c.iter().map(|&(i, q)| pi[i as usize] * q).sum::<f64>()
            })
            .collect();
        let change: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        normalize(&mut pi);
        if change <= INDUCED_TOL {
            return Ok(pi);
        }
    }
    Err(Error::Convergence(format!(
        "induced chain did not settle in {INDUCED_CAP} steps"
    )))
}

pub fn invariant_density(p: &TransferMatrix) -> Result<InvariantDensity> {
    let n = p.len();
    let mut base = Vec::new();
    let mut base_pos = vec![NONE; n];
    for (i, &s) in p.states.iter().enumerate() {
        if is_base(s) {
            base_pos[i] = base.len() as u32;
            base.push(i);
        }
    }
    if base.is_empty() {
        return Err(Error::DegenerateSupport("no base states".into()));
    }
    let order = topological_order(p, &base_pos)?;
    let stay = |i: usize| {
        p.row(i)
            .filter(|&(j, _)| j == i)
            .map(|(_, q)| q)
            .sum::<f64>()
    };

    // Hitting distribution on the base from each non-base state.
    let mut hit: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut scratch = vec![0.0; base.len()];
    let mut touched: Vec<u32> = Vec::new();
    for &t in order.iter().rev() {
        let leave = 1.0 - stay(t);
        if leave <= 0.0 {
            return Err(Error::DegenerateSupport(format!(
                "state {} never leaves",
                p.states[t]
            )));
        }
        for (u, q) in p.row(t) {
            if u == t {
                continue;
            }
            let mut add = |b: u32, w: f64| {
                if scratch[b as usize] == 0.0 {
                    touched.push(b);
                }
                scratch[b as usize] += w;
            };
            if base_pos[u] != NONE {
                add(base_pos[u], q);
            } else {
                for &(b, w) in &hit[u] {
                    add(b, q * w);
                }
            }
        }
        touched.sort_unstable();
        hit[t] = touched
            .iter()
            .map(|&b| (b, scratch[b as usize] / leave))
            .collect();
        for &b in &touched {
            scratch[b as usize] = 0.0;
        }
        touched.clear();
    }

    // Chain induced on the base.
    let kernel: Vec<Vec<(u32, f64)>> = base
        .par_iter()
        .map(|&s| {
            let mut acc: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
            for (u, q) in p.row(s) {
                if base_pos[u] != NONE {
                    *acc.entry(base_pos[u]).or_default() += q;
                } else {
                    for &(b, w) in &hit[u] {
                        *acc.entry(b).or_default() += q * w;
                    }
                }
            }
            acc.into_iter().collect()
        })
        .collect();
    let pi = if base.len() <= DENSE_LIMIT {
        let mut dense = vec![vec![0.0; base.len()]; base.len()];
        for (i, r) in kernel.iter().enumerate() {
            for &(j, q) in r {
                dense[i][j as usize] += q;
            }
        }
        stationary_dense(dense)?
    } else {
        stationary_sparse(&kernel)?
    };

    // Unfold: expected visits to each non-base state per unit of base mass.
    let mut rho = vec![0.0; n];
    let mut inflow = vec![0.0; n];
    for (k, &s) in base.iter().enumerate() {
        rho[s] = pi[k];
        for (u, q) in p.row(s) {
            if base_pos[u] == NONE {
                inflow[u] += pi[k] * q;
            }
        }
    }
    for &t in &order {
        let v = inflow[t] / (1.0 - stay(t));
        rho[t] = v;
        for (u, q) in p.row(t) {
            if u != t && base_pos[u] == NONE {
                inflow[u] += v * q;
            }
        }
    }
    normalize(&mut rho);
    let cens = p.censored_index();

    let mut history = vec![l1_residual(p, &rho)];
    while *history.last().unwrap() > RESIDUAL_TOL && history.len() <= POLISH_CAP {
        rho = p.push(&rho);
        normalize(&mut rho);
        history.push(l1_residual(p, &rho));
    }
    let residual = *history.last().unwrap();
    if residual > RESIDUAL_TOL {
        return Err(Error::NoConvergence { residual, history });
    }
    let total_mass: f64 = p.mass.iter().sum();
    let (mut floor, mut relative_floor) = (f64::INFINITY, f64::INFINITY);
    for (s, &r) in rho.iter().enumerate() {
        if Some(s) != cens {
            floor = floor.min(r);
            relative_floor = relative_floor.min(r / (p.mass[s] / total_mass));
        }
    }
    Ok(InvariantDensity {
        censored_mass: cens.map_or(0.0, |c| rho[c]),
        rho,
        residual,
        history,
        floor,
        relative_floor,
    })
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Modulus estimate of the second eigenvalue by deflated power iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenProxy {
    pub modulus: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `v ↦ vP` on vectors of zero total mass. The ratio of norms over
/// `period` steps, taken to the `1/period` power, smooths out rotation from
/// complex pairs.
pub fn second_eigenvalue(
    p: &TransferMatrix,
    rho: &[f64],
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> EigenProxy {
    let mut rng = stream(seed, 0);
    let mut v: Vec<f64> = (0..p.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let deflate = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().zip(rho).for_each(|(x, r)| *x -= s * r);
        let n: f64 = v.iter().map(|x| x.abs()).sum();
        v.iter_mut().for_each(|x| *x /= n);
    };
    deflate(&mut v);
    let period = 8;
    let mut last = f64::NAN;
    let mut it = 0;
    while it < max_iter {
        let mut w = v.clone();
        for _ in 0..period {
            w = p.push(&w);
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().zip(rho).for_each(|(x, r)| *x -= s * r);
        let growth: f64 = w.iter().map(|x| x.abs()).sum();
        let est = growth.powf(1.0 / period as f64);
        it += period;
        v = w;
        deflate(&mut v);
        if (est - last).abs() <= tol {
            return EigenProxy {
                modulus: est,
                iterations: it,
                converged: true,
            };
        }
        last = est;
    }
    EigenProxy {
        modulus: last,
        iterations: it,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperbolicModel, ModelConfig};
    use crate::returns::LevelTable;
    use crate::tower::ulam::{ulam_discretize, IntervalPropagation, TestPoints, UlamGrid};

    #[test]
    fn dense_solver_two_states() {
        let pi = stationary_dense(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((pi[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!(stationary_dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn equal_slope_tower_has_uniform_density() {
        let cfg = ModelConfig {
            cells: 2,
            skew: 0.0,
            intermittent: false,
            ..ModelConfig::default()
        };
        let m = HyperbolicModel::build(&cfg).unwrap();
        let table = LevelTable::new(&m, 1).unwrap();
        let grid = UlamGrid {
            bins: 64,
            max_level: 60,
            ..UlamGrid::default()
        };
        let d = ulam_discretize(&m, &table, &grid, &IntervalPropagation::default(), &[]).unwrap();
        let inv = invariant_density(&d.matrix).unwrap();
        assert!((inv.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(inv.residual <= 1e-10);
        let dev = inv
            .relative(&d.matrix)
            .iter()
            .map(|r| (r - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-8, "deviation {dev}");
    }

    #[test]
    fn intermittent_tower_density_is_positive_and_mixing() {
        let m = HyperbolicModel::build(&ModelConfig::default()).unwrap();
        let table = LevelTable::new(&m, 200_000).unwrap();
        let grid = UlamGrid {
            bins: 64,
            max_level: 400,
            points_per_bin: 5000,
            ..UlamGrid::default()
        };
        let d = ulam_discretize(&m, &table, &grid, &TestPoints, &[]).unwrap();
        let inv = invariant_density(&d.matrix).unwrap();
        assert!((inv.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(inv.residual <= 1e-10);
        assert!(inv.floor > 0.0);
        let eig = second_eigenvalue(&d.matrix, &inv.rho, 1, 1e-6, 4000);
        assert!(eig.modulus < 1.0, "{eig:?}");
    }
}
