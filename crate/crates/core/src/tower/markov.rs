//! Ulam matrix of the unstable quotient map on a partition adapted to the
//! neutral fixed point.
//!
//! Affine cells carry uniform bins. In `W0` the exit strips `J_0, J′_0` carry
//! uniform bins, grouped into `neutral_bins` blocks, and every deeper level
//! set `J_n` is cut into the preimages of those blocks. The descent
//! `J_n → J_{n−1}` is then an exact deterministic move; only `J_1 → J_0` and
//! the affine branches spread mass, and they do so by exact interval overlap.
//! Everything below `J_L` is one censored state left at the exact mean
//! sojourn rate. No test points are drawn, so the matrix carries no sampling
//! noise.

use rayon::prelude::*;

use crate::error::{ConfigIssue, Error, Result};
use crate::intermittent::phi_inverse;
use crate::model::{BranchKind, HyperbolicModel, Point2};
use crate::observables::Observable;
use crate::returns::LevelTable;

use super::ulam::{check_grid, Discretization, TowerState, TransferMatrix, UlamGrid, UlamScheme};

pub struct NeutralPartition;

#[derive(Debug, Clone, Copy)]
struct Part {
    lo: f64,
    hi: f64,
    state: usize,
}

struct Layout {
    states: Vec<TowerState>,
    spans: Vec<(usize, f64, f64)>,
    parts: Vec<Vec<Part>>,
}

impl Layout {
    fn add(&mut self, st: TowerState, cell: usize, lo: f64, hi: f64) {
        self.parts[cell].push(Part {
            lo,
            hi,
            state: self.states.len(),
        });
        self.states.push(st);
        self.spans.push((cell, lo, hi));
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
const GAUSS: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_8),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_8),
];

fn interval_mean(m: &HyperbolicModel, o: &dyn Observable, cell: usize, lo: f64, hi: f64) -> f64 {
    let b = m.cells[cell].center().1;
    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    GAUSS
        .iter()
        .map(|&(x, w)| 0.5 * w * o.eval(m, Point2::new(cell, mid + half * x, b)))
        .sum()
}

/// Bin edges on one side. `strip` holds the fine exit-strip edges;
/// `levels[n]` holds the coarse group edges pulled back `n` times, so
/// `levels[0]` is the strip at group resolution. Ascending within a level.
struct SideEdges {
    strip: Vec<f64>,
    levels: Vec<Vec<f64>>,
}

fn side_edges(
    m: &HyperbolicModel,
    seq: &[f64],
    exit_bins: usize,
    groups: usize,
    depth: usize,
) -> Result<SideEdges> {
    let p = m.params();
    let (outer, inner) = (seq[0], seq[1]);
    let (lo, hi) = if outer < inner {
        (outer, inner)
    } else {
        (inner, outer)
    };
    let mut strip: Vec<f64> = (0..=exit_bins)
        .map(|i| lo + (hi - lo) * i as f64 / exit_bins as f64)
        .collect();
    strip[0] = lo;
    strip[exit_bins] = hi;
    let step = exit_bins / groups;
    let mut current: Vec<f64> = (0..=groups).map(|k| strip[k * step]).collect();
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(current.clone());
    for n in 1..=depth + 1 {
        let mut next = current
            .iter()
            .map(|&x| phi_inverse(x, p))
            .collect::<Result<Vec<f64>>>()?;
        // pin the level-set ends to the tabulated sequence so levels tile exactly
        let (a, b) = (seq[n], seq[n + 1]);
        next[0] = a.min(b);
        next[groups] = a.max(b);
        levels.push(next.clone());
        current = next;
    }
    Ok(SideEdges { strip, levels })
}

impl UlamScheme for NeutralPartition {
    fn name(&self) -> &'static str {
        "neutral-partition"
    }

    fn discretize(
        &self,
        m: &HyperbolicModel,
        table: &LevelTable,
        grid: &UlamGrid,
        observables: &[&dyn Observable],
    ) -> Result<Discretization> {
        check_grid(grid)?;
        let (bins, depth) = (grid.bins, grid.max_level);
        let (ebins, groups) = (grid.exit_bins, grid.neutral_bins);
        let intermittent = m.is_intermittent();
        if intermittent {
            if groups == 0 || ebins == 0 || ebins % groups != 0 {
                return Err(ConfigIssue::Parameter(format!(
                    "neutral_bins {groups} must be positive and divide exit_bins {ebins}"
                ))
                .into());
            }
            if table.depth() < depth + 3 {
                return Err(ConfigIssue::Parameter(format!(
                    "level table depth {} is too shallow for {depth} levels",
                    table.depth()
                ))
                .into());
            }
            if m.params().theta >= 1.0 {
                return Err(ConfigIssue::Parameter(
                    "the censored sojourn is infinite for theta >= 1".into(),
                )
                .into());
            }
        }

        // States and their intervals, cell by cell.
        let mut lay = Layout {
            states: Vec::new(),
            spans: Vec::new(),
            parts: vec![Vec::new(); m.dim()],
        };
        for c in 0..m.dim() {
            if c == 0 && intermittent {
                continue;
            }
            let r = m.cells[c];
            for i in 0..bins {
                let lo = r.u.0 + r.width() * i as f64 / bins as f64;
                let hi = if i + 1 == bins {
                    r.u.1
                } else {
                    r.u.0 + r.width() * (i + 1) as f64 / bins as f64
                };
                lay.add(
                    TowerState::Cell {
                        cell: c as u32,
                        bin: i as u32,
                    },
                    c,
                    lo,
                    hi,
                );
            }
        }
        let (mut right, mut left) = (None, None);
        let mut neutral_base = [0usize; 2];
        let mut censored = usize::MAX;
        let mut strip_base = 0;
        if intermittent {
            let l_edges = side_edges(m, &table.left.values, ebins, groups, depth)?;
            let r_edges = side_edges(m, &table.right.values, ebins, groups, depth)?;
            strip_base = lay.states.len();
            for (side, e) in [(0u32, &l_edges), (1, &r_edges)] {
                for i in 0..ebins {
                    let bin = side * ebins as u32 + i as u32;
                    lay.add(
                        TowerState::Cell { cell: 0, bin },
                        0,
                        e.strip[i],
                        e.strip[i + 1],
                    );
                }
            }
            for (s, (e, is_left)) in [(&l_edges, true), (&r_edges, false)]
                .into_iter()
                .enumerate()
            {
                neutral_base[s] = lay.states.len();
                for n in 1..=depth {
                    for k in 0..groups {
                        let st = TowerState::Neutral {
                            left: is_left,
                            depth: n as u32,
                            bin: k as u32,
                        };
                        lay.add(st, 0, e.levels[n][k], e.levels[n][k + 1]);
                    }
                }
            }
            censored = lay.states.len();
            let (lo, hi) = (table.left.values[depth + 1], table.right.values[depth + 1]);
            lay.add(TowerState::Censored, 0, lo, hi);
            left = Some(l_edges);
            right = Some(r_edges);
        }
        for p in &mut lay.parts {
            p.sort_by(|x, y| x.lo.total_cmp(&y.lo));
        }
        let Layout {
            states,
            spans,
            parts,
        } = lay;
        let neutral_index = |is_left: bool, n: usize, k: usize| {
            neutral_base[if is_left { 0 } else { 1 }] + (n - 1) * groups + k
        };

        // Mean time spent below J_L: Σ_{m>L} |a_m| / |a_{L+1}| per side.
        let (mut exit_p, mut right_share) = (1.0, 0.5);
        if intermittent {
            let tau = m.params().tau;
            let tail = |v: &[f64]| {
                let last = v.len() - 1;
                let body: f64 = v[depth + 1..].iter().map(|x| x.abs()).sum();
                body + v[last].abs() * last as f64 / (tau - 1.0)
            };
            let (ar, al) = (table.right.values[depth + 1], -table.left.values[depth + 1]);
            let mean = (tail(&table.right.values) + tail(&table.left.values)) / (ar + al);
            exit_p = 1.0 / mean;
            right_share = ar / (ar + al);
        }

        let spread =
            |target: usize, y0: f64, y1: f64, w: f64, lj: f64, out: &mut Vec<(usize, f64, f64)>| {
                let ps = &parts[target];
                let start = ps.partition_point(|p| p.hi <= y0);
                let len = y1 - y0;
                for p in &ps[start..] {
                    if p.lo >= y1 {
                        break;
                    }
                    let ov = p.hi.min(y1) - p.lo.max(y0);
                    if ov > 0.0 {
                        out.push((p.state, w * ov / len, lj));
                    }
                }
            };

        let rows: Vec<Vec<(usize, f64, f64)>> = (0..states.len())
            .into_par_iter()
            .map(|i| -> Result<Vec<(usize, f64, f64)>> {
                let mut out = Vec::new();
                let (cell, x0, x1) = spans[i];
                match states[i] {
                    TowerState::Cell { .. } => {
                        for &k in m.branches_from(cell) {
                            let br = &m.branches[k];
                            let (l, h) = (x0.max(br.u_lo), x1.min(br.u_hi));
                            if l >= h {
                                continue;
                            }
                            if br.kind == BranchKind::Intermittent {
                                return Err(Error::Domain(format!(
                                    "bin {i} overlaps the neutral branch"
                                )));
                            }
                            let t = &m.cells[br.target];
                            let map =
                                |x: f64| t.u.0 + (x - br.u_lo) / (br.u_hi - br.u_lo) * t.width();
                            spread(
                                br.target,
                                map(l),
                                map(h),
                                (h - l) / (x1 - x0),
                                br.expansion(m).ln(),
                                &mut out,
                            );
                        }
                    }
                    TowerState::Neutral {
                        left: is_left,
                        depth: n,
                        bin: k,
                    } => {
                        let (n, k) = (n as usize, k as usize);
                        let e = if is_left {
                            left.as_ref()
                        } else {
                            right.as_ref()
                        }
                        .unwrap();
                        if n == 1 {
                            // Ulam spread over the exit-strip bins of block k
                            let step = ebins / groups;
                            let p = m.params();
                            let side = if is_left { 0 } else { 1 };
                            let mut pre = Vec::with_capacity(step + 1);
                            for j in 0..=step {
                                pre.push(match j {
                                    0 => x0,
                                    j if j == step => x1,
                                    _ => phi_inverse(e.strip[k * step + j], p)?,
                                });
                            }
                            for j in 0..step {
                                let (plo, phi_) = (pre[j], pre[j + 1]);
                                let bin = k * step + j;
                                let lj = ((e.strip[bin + 1] - e.strip[bin]) / (phi_ - plo)).ln();
                                out.push((
                                    strip_base + side * ebins + bin,
                                    (phi_ - plo) / (x1 - x0),
                                    lj,
                                ));
                            }
                        } else {
                            let (lo, hi) = (e.levels[n - 1][k], e.levels[n - 1][k + 1]);
                            out.push((
                                neutral_index(is_left, n - 1, k),
                                1.0,
                                ((hi - lo) / (x1 - x0)).ln(),
                            ));
                        }
                    }
                    TowerState::Censored => {
                        out.push((i, 1.0 - exit_p, 0.0));
                        for (e, is_left, share) in [
                            (left.as_ref().unwrap(), true, 1.0 - right_share),
                            (right.as_ref().unwrap(), false, right_share),
                        ] {
                            let deep = &e.levels[depth + 1];
                            let width = deep[groups] - deep[0];
                            for k in 0..groups {
                                let w = exit_p * share * (deep[k + 1] - deep[k]) / width;
                                out.push((neutral_index(is_left, depth, k), w, 0.0));
                            }
                        }
                    }
                    TowerState::Level { .. } => unreachable!("no tower levels in this partition"),
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mass: Vec<f64> = spans.iter().map(|&(_, lo, hi)| hi - lo).collect();
        let obs: Vec<Vec<f64>> = observables
            .iter()
            .map(|o| {
                spans
                    .par_iter()
                    .enumerate()
                    .map(|(i, &(cell, lo, hi))| {
                        if i == censored {
                            o.eval(m, Point2::new(cell, 0.0, m.cells[cell].center().1))
                        } else {
                            interval_mean(m, *o, cell, lo, hi)
                        }
                    })
                    .collect()
            })
            .collect();
        let total: f64 = mass.iter().sum();
        let censored_fraction = if intermittent {
            mass[censored] / total
        } else {
            0.0
        };
        let overflow_fraction = if intermittent {
            mass[censored] / m.cells[0].width()
        } else {
            0.0
        };
        let matrix = TransferMatrix::from_rows(states, rows, mass, bins, depth, Vec::new())?;
        Ok(Discretization {
            matrix,
            observables: obs,
            censored_fraction,
            overflow_fraction,
            skipped: 0,
        })
    }
}
