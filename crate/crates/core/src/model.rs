//! A piecewise "intermittent baker": the product map `(φ(a), φ⁻¹(b))` on a
//! middle strip of the cell `W0`, and affine Markov branches everywhere else.
//!
//! Every branch maps a vertical strip of its source cell (a sub-interval of
//! the unstable coordinate times the full stable range) onto a horizontal
//! strip of its target cell (the full unstable range times a sub-interval of
//! the stable coordinate). The vertical strips tile each source and the
//! horizontal strips tile each target, so the map is a bijection up to the
//! strip boundaries.

use crate::error::{ConfigIssue, Error, Result};
use crate::intermittent::{phi, phi_inverse, IntermittentParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    /// Unstable extent.
    pub u: (f64, f64),
    /// Stable extent.
    pub s: (f64, f64),
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.u.1 - self.u.0
    }

    pub fn height(&self) -> f64 {
        self.s.1 - self.s.0
    }

    pub fn contains(&self, a: f64, b: f64) -> bool {
        a >= self.u.0 && a <= self.u.1 && b >= self.s.0 && b <= self.s.1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u.0 + self.u.1), 0.5 * (self.s.0 + self.s.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub cell: usize,
    pub a: f64,
    pub b: f64,
}

impl Point2 {
    pub fn new(cell: usize, a: f64, b: f64) -> Self {
        Point2 { cell, a, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Affine,
    Intermittent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub source: usize,
    pub u_lo: f64,
    pub u_hi: f64,
    pub target: usize,
    pub v_lo: f64,
    pub v_hi: f64,
    pub kind: BranchKind,
}

impl Branch {
    /// Unstable expansion factor of an affine branch.
    pub fn expansion(&self, m: &HyperbolicModel) -> f64 {
        m.cells[self.target].width() / (self.u_hi - self.u_lo)
    }

    /// Stable contraction factor of an affine branch.
    pub fn contraction(&self, m: &HyperbolicModel) -> f64 {
        (self.v_hi - self.v_lo) / m.cells[self.source].height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub theta: f64,
    pub lambda: f64,
    /// Number of affine cells `d`; the model has `d + 1` cells.
    pub cells: usize,
    /// Row-major 0/1 matrix of size `(d+1)²`; all ones when absent.
    pub transition: Option<Vec<Vec<u8>>>,
    pub a0: f64,
    pub a0_prime: f64,
    /// Non-uniformity of the branch partitions, in `[0, 0.5)`. Nonzero values
    /// keep branch slopes away from powers of two, where floating-point orbits
    /// of affine maps collapse onto dyadic rationals.
    pub skew: f64,
    /// With `false` the self-branch of `W0` is affine too.
    pub intermittent: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            theta: 0.5,
            lambda: 0.4,
            cells: 3,
            transition: None,
            a0: 0.5,
            a0_prime: -0.5,
            skew: 0.1,
            intermittent: true,
        }
    }
}

const MAX_REPLICATION: usize = 64;

#[derive(Debug, Clone)]
pub struct HyperbolicModel {
    pub cells: Vec<Rect>,
    /// Region of `W0` where the intermittent product map acts.
    pub v0: Option<Rect>,
    pub transition: Vec<Vec<u8>>,
    pub lambda: f64,
    pub n0: usize,
    pub intermittent: IntermittentParams,
    /// How many times each cell's target list is repeated.
    pub replication: usize,
    pub branches: Vec<Branch>,
    by_source: Vec<Vec<usize>>,
    by_target: Vec<Vec<usize>>,
    span: f64,
}

/// Smallest `n` with `Aⁿ > 0` entrywise, searched up to `dim²`.
pub fn aperiodicity_index(a: &[Vec<u8>]) -> Result<usize> {
    let dim = a.len();
    if dim == 0
        || a.iter()
            .any(|row| row.len() != dim || row.iter().all(|&x| x == 0))
    {
        return Err(ConfigIssue::MalformedTransition.into());
    }
    let base: Vec<Vec<bool>> = a
        .iter()
        .map(|r| r.iter().map(|&x| x != 0).collect())
        .collect();
    let mut power = base.clone();
    for n in 1..=dim * dim {
        if power.iter().all(|r| r.iter().all(|&x| x)) {
            return Ok(n);
        }
        let mut next = vec![vec![false; dim]; dim];
        for i in 0..dim {
            for k in 0..dim {
                if power[i][k] {
                    for j in 0..dim {
                        next[i][j] |= base[k][j];
                    }
                }
            }
        }
        power = next;
    }
    Err(ConfigIssue::NotAperiodic.into())
}

/// `k + 1` increasing cut points of `[lo, hi]`, bent by `x + skew·x(1−x)`.
fn cut_points(lo: f64, hi: f64, k: usize, skew: f64) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..=k)
        .map(|j| {
            let x = j as f64 / k as f64;
            lo + (hi - lo) * (x + skew * x * (1.0 - x))
        })
        .collect();
    cuts[0] = lo;
    cuts[k] = hi;
    cuts
}

struct Layout {
    branches: Vec<Branch>,
}

impl HyperbolicModel {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        if cfg.cells < 1 {
            return Err(ConfigIssue::Parameter("need at least one affine cell".into()).into());
        }
        if !(cfg.lambda > 0.0 && cfg.lambda < 1.0) {
            return Err(ConfigIssue::Parameter(format!(
                "lambda must be in (0,1), got {}",
                cfg.lambda
            ))
            .into());
        }
        if !(0.0..0.5).contains(&cfg.skew) {
            return Err(ConfigIssue::Parameter(format!(
                "skew must be in [0,0.5), got {}",
                cfg.skew
            ))
            .into());
        }
        let ip = IntermittentParams::new(cfg.theta, cfg.a0, cfg.a0_prime)?;
        let dim = cfg.cells + 1;
        let transition = cfg
            .transition
            .clone()
            .unwrap_or_else(|| vec![vec![1; dim]; dim]);
        if transition.len() != dim
            || transition
                .iter()
                .any(|r| r.len() != dim || r.iter().any(|&x| x > 1))
        {
            return Err(ConfigIssue::MalformedTransition.into());
        }
        let n0 = aperiodicity_index(&transition)?;
        if cfg.intermittent && transition[0][0] != 1 {
            return Err(ConfigIssue::MissingFixedPoint.into());
        }
        if (1..dim).all(|j| transition[0][j] == 0) {
            return Err(ConfigIssue::NoExitFromW0.into());
        }

        let mut cells = vec![Rect {
            u: (cfg.a0_prime, cfg.a0),
            s: (cfg.a0_prime, cfg.a0),
        }];
        cells.extend((1..dim).map(|_| Rect {
            u: (0.0, 1.0),
            s: (0.0, 1.0),
        }));
        let (lo, hi) = cells
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.u.0).min(c.s.0), hi.max(c.u.1).max(c.s.1))
            });

        let inner = if cfg.intermittent {
            Some((phi_inverse(cfg.a0_prime, &ip)?, phi_inverse(cfg.a0, &ip)?))
        } else {
            None
        };

        let mut last_issue = String::new();
        for r in 1..=MAX_REPLICATION {
            let layout = match Self::layout(cfg, &cells, &transition, inner, r) {
                Ok(l) => l,
                Err(issue) => {
                    last_issue = issue;
                    continue;
                }
            };
            let mut model = HyperbolicModel {
                v0: inner.map(|(l, h)| Rect {
                    u: (l, h),
                    s: cells[0].s,
                }),
                cells: cells.clone(),
                transition: transition.clone(),
                lambda: cfg.lambda,
                n0,
                intermittent: ip.clone(),
                replication: r,
                branches: layout.branches,
                by_source: Vec::new(),
                by_target: Vec::new(),
                span: hi - lo,
            };
            if let Err(issue) = model.hyperbolicity_issue() {
                last_issue = issue;
                continue;
            }
            model.index();
            return Ok(model);
        }
        Err(ConfigIssue::Hyperbolicity(last_issue).into())
    }

    fn layout(
        cfg: &ModelConfig,
        cells: &[Rect],
        transition: &[Vec<u8>],
        inner: Option<(f64, f64)>,
        r: usize,
    ) -> std::result::Result<Layout, String> {
        let dim = cells.len();
        let targets_of = |i: usize, skip_self: bool| -> Vec<usize> {
            let once: Vec<usize> = (0..dim)
                .filter(|&j| transition[i][j] == 1 && !(skip_self && j == i))
                .collect();
            (0..r).flat_map(|_| once.iter().copied()).collect()
        };

        // Unstable pieces per source, as (source, u_lo, u_hi, target, kind).
        let mut pieces: Vec<(usize, f64, f64, usize, BranchKind)> = Vec::new();
        for i in 0..dim {
            let c = cells[i];
            match (i, inner) {
                (0, Some((l1, r1))) => {
                    let outer = targets_of(0, true);
                    if outer.len() < 2 {
                        return Err("W0 needs at least two outer branches".into());
                    }
                    let left_n = outer.len().div_ceil(2);
                    let left = cut_points(c.u.0, l1, left_n, cfg.skew);
                    for (k, &t) in outer[..left_n].iter().enumerate() {
                        pieces.push((0, left[k], left[k + 1], t, BranchKind::Affine));
                    }
                    pieces.push((0, l1, r1, 0, BranchKind::Intermittent));
                    let right_n = outer.len() - left_n;
                    let right = cut_points(r1, c.u.1, right_n, cfg.skew);
                    for (k, &t) in outer[left_n..].iter().enumerate() {
                        pieces.push((0, right[k], right[k + 1], t, BranchKind::Affine));
                    }
                }
                _ => {
                    let ts = targets_of(i, false);
                    let cuts = cut_points(c.u.0, c.u.1, ts.len(), cfg.skew);
                    for (k, &t) in ts.iter().enumerate() {
                        pieces.push((i, cuts[k], cuts[k + 1], t, BranchKind::Affine));
                    }
                }
            }
        }

        // Stable strips per target, filled in source order.
        let mut branches: Vec<Branch> = Vec::with_capacity(pieces.len());
        let mut strip = vec![(0.0, 0.0); pieces.len()];
        for j in 0..dim {
            let c = cells[j];
            let incoming: Vec<usize> = (0..pieces.len())
                .filter(|&p| pieces[p].3 == j && pieces[p].4 == BranchKind::Affine)
                .collect();
            match (j, inner) {
                (0, Some((l1, r1))) => {
                    if incoming.len() < 2 {
                        return Err("W0 needs at least two incoming affine branches".into());
                    }
                    let bottom_n = incoming.len().div_ceil(2);
                    let bottom = cut_points(c.s.0, l1, bottom_n, cfg.skew);
                    let top = cut_points(r1, c.s.1, incoming.len() - bottom_n, cfg.skew);
                    for (k, &p) in incoming.iter().enumerate() {
                        strip[p] = if k < bottom_n {
                            (bottom[k], bottom[k + 1])
                        } else {
                            (top[k - bottom_n], top[k - bottom_n + 1])
                        };
                    }
                    let self_piece = pieces
                        .iter()
                        .position(|p| p.4 == BranchKind::Intermittent)
                        .unwrap();
                    strip[self_piece] = (l1, r1);
                }
                _ => {
                    if incoming.is_empty() {
                        return Err(format!("cell {j} has no incoming branch"));
                    }
                    let cuts = cut_points(c.s.0, c.s.1, incoming.len(), cfg.skew);
                    for (k, &p) in incoming.iter().enumerate() {
                        strip[p] = (cuts[k], cuts[k + 1]);
                    }
                }
            }
        }
        for (p, &(source, u_lo, u_hi, target, kind)) in pieces.iter().enumerate() {
            branches.push(Branch {
                source,
                u_lo,
                u_hi,
                target,
                v_lo: strip[p].0,
                v_hi: strip[p].1,
                kind,
            });
        }
        Ok(Layout { branches })
    }

    fn hyperbolicity_issue(&self) -> std::result::Result<(), String> {
        let inv = 1.0 / self.lambda;
        for br in self
            .branches
            .iter()
            .filter(|b| b.kind == BranchKind::Affine)
        {
            let (e, c) = (br.expansion(self), br.contraction(self));
            if e < inv * (1.0 - 1e-12) || c > self.lambda * (1.0 + 1e-12) {
                return Err(format!(
                    "branch {}->{} has expansion {e:.4} and contraction {c:.4} for lambda {}",
                    br.source, br.target, self.lambda
                ));
            }
        }
        Ok(())
    }

    fn index(&mut self) {
        let dim = self.cells.len();
        self.by_source = vec![Vec::new(); dim];
        self.by_target = vec![Vec::new(); dim];
        for (k, br) in self.branches.iter().enumerate() {
            self.by_source[br.source].push(k);
            self.by_target[br.target].push(k);
        }
        let brs = &self.branches;
        for list in &mut self.by_source {
            list.sort_by(|&x, &y| brs[x].u_lo.total_cmp(&brs[y].u_lo));
        }
        for list in &mut self.by_target {
            list.sort_by(|&x, &y| brs[x].v_lo.total_cmp(&brs[y].v_lo));
        }
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn is_intermittent(&self) -> bool {
        self.v0.is_some()
    }

    pub fn params(&self) -> &IntermittentParams {
        &self.intermittent
    }

    /// Branch indices leaving `cell`, ordered by unstable coordinate.
    pub fn branches_from(&self, cell: usize) -> &[usize] {
        &self.by_source[cell]
    }

    /// Branch indices entering `cell`, ordered by stable coordinate.
    pub fn branches_into(&self, cell: usize) -> &[usize] {
        &self.by_target[cell]
    }

    pub fn validate(&self, p: Point2) -> Result<()> {
        match self.cells.get(p.cell) {
            Some(r) if r.contains(p.a, p.b) => Ok(()),
            Some(_) => Err(Error::Domain(format!(
                "({}, {}) outside cell {}",
                p.a, p.b, p.cell
            ))),
            None => Err(Error::Domain(format!("no cell {}", p.cell))),
        }
    }

    fn locate(
        &self,
        list: &[usize],
        x: f64,
        cell: usize,
        lo: impl Fn(&Branch) -> f64,
        hi: impl Fn(&Branch) -> f64,
    ) -> Result<usize> {
        let idx = list
            .partition_point(|&k| hi(&self.branches[k]) <= x)
            .min(list.len() - 1);
        if idx > 0 && lo(&self.branches[list[idx]]) == x {
            return Err(Error::BoundaryTie { cell, coord: x });
        }
        Ok(list[idx])
    }

    /// Branch acting on a point of `cell` with unstable coordinate `a`.
    pub fn branch_at(&self, cell: usize, a: f64) -> Result<usize> {
        let r = self
            .cells
            .get(cell)
            .ok_or_else(|| Error::Domain(format!("no cell {cell}")))?;
        if !(a >= r.u.0 && a <= r.u.1) {
            return Err(Error::Domain(format!(
                "unstable coordinate {a} outside cell {cell}"
            )));
        }
        self.locate(&self.by_source[cell], a, cell, |b| b.u_lo, |b| b.u_hi)
    }

    /// Branch whose image in `cell` contains stable coordinate `b`.
    pub fn branch_into_at(&self, cell: usize, b: f64) -> Result<usize> {
        let r = self
            .cells
            .get(cell)
            .ok_or_else(|| Error::Domain(format!("no cell {cell}")))?;
        if !(b >= r.s.0 && b <= r.s.1) {
            return Err(Error::Domain(format!(
                "stable coordinate {b} outside cell {cell}"
            )));
        }
        self.locate(&self.by_target[cell], b, cell, |br| br.v_lo, |br| br.v_hi)
    }

    fn forward_unstable(&self, br: &Branch, a: f64) -> Result<f64> {
        let t = &self.cells[br.target];
        let out = match br.kind {
            BranchKind::Intermittent => phi(a, &self.intermittent)?,
            BranchKind::Affine => t.u.0 + (a - br.u_lo) / (br.u_hi - br.u_lo) * t.width(),
        };
        Ok(out.clamp(t.u.0, t.u.1))
    }

    fn forward_stable(&self, br: &Branch, b: f64) -> Result<f64> {
        let s = &self.cells[br.source];
        let out = match br.kind {
            BranchKind::Intermittent => phi_inverse(b, &self.intermittent)?,
            BranchKind::Affine => br.v_lo + (b - s.s.0) / s.height() * (br.v_hi - br.v_lo),
        };
        Ok(out.clamp(br.v_lo, br.v_hi))
    }

    fn backward_unstable(&self, br: &Branch, a: f64) -> Result<f64> {
        let t = &self.cells[br.target];
        let out = match br.kind {
            BranchKind::Intermittent => phi_inverse(a, &self.intermittent)?,
            BranchKind::Affine => br.u_lo + (a - t.u.0) / t.width() * (br.u_hi - br.u_lo),
        };
        Ok(out.clamp(br.u_lo, br.u_hi))
    }

    fn backward_stable(&self, br: &Branch, b: f64) -> Result<f64> {
        let s = &self.cells[br.source];
        let out = match br.kind {
            BranchKind::Intermittent => phi(b, &self.intermittent)?,
            BranchKind::Affine => s.s.0 + (b - br.v_lo) / (br.v_hi - br.v_lo) * s.height(),
        };
        Ok(out.clamp(s.s.0, s.s.1))
    }

    /// One forward step, also returning the branch index used.
    pub fn step_with_branch(&self, p: Point2) -> Result<(Point2, usize)> {
        self.validate(p)?;
        let k = self.branch_at(p.cell, p.a)?;
        let br = &self.branches[k];
        let q = Point2::new(
            br.target,
            self.forward_unstable(br, p.a)?,
            self.forward_stable(br, p.b)?,
        );
        Ok((q, k))
    }

    /// One forward step with the branch index and the unstable derivative.
    pub fn step_with_derivative(&self, p: Point2) -> Result<(Point2, usize, f64)> {
        let (q, k) = self.step_with_branch(p)?;
        let br = &self.branches[k];
        let du = match br.kind {
            BranchKind::Intermittent => {
                crate::intermittent::phi_derivative(p.a, &self.intermittent)
            }
            BranchKind::Affine => br.expansion(self),
        };
        Ok((q, k, du))
    }

    /// One forward step with unstable expansion and stable contraction rates.
    pub fn step_with_jacobians(&self, p: Point2) -> Result<(Point2, usize, f64, f64)> {
        let (q, k, du) = self.step_with_derivative(p)?;
        let br = &self.branches[k];
        let ds = match br.kind {
            BranchKind::Intermittent => {
                1.0 / crate::intermittent::phi_derivative(q.b, &self.intermittent)
            }
            BranchKind::Affine => br.contraction(self),
        };
        Ok((q, k, du, ds))
    }

    pub fn step(&self, p: Point2) -> Result<Point2> {
        self.step_with_branch(p).map(|(q, _)| q)
    }

    pub fn step_inverse_with_branch(&self, p: Point2) -> Result<(Point2, usize)> {
        self.validate(p)?;
        let k = self.branch_into_at(p.cell, p.b)?;
        let br = &self.branches[k];
        let q = Point2::new(
            br.source,
            self.backward_unstable(br, p.a)?,
            self.backward_stable(br, p.b)?,
        );
        Ok((q, k))
    }

    pub fn step_inverse(&self, p: Point2) -> Result<Point2> {
        self.step_inverse_with_branch(p).map(|(q, _)| q)
    }

    /// The one-dimensional expanding factor obtained by forgetting `b`.
    pub fn unstable_quotient_map(&self, cell: usize, a: f64) -> Result<(usize, f64)> {
        let k = self.branch_at(cell, a)?;
        let br = &self.branches[k];
        Ok((br.target, self.forward_unstable(br, a)?))
    }

    /// As [`Self::unstable_quotient_map`] with the derivative of the step.
    pub fn unstable_quotient_map_with_derivative(
        &self,
        cell: usize,
        a: f64,
    ) -> Result<(usize, f64, f64, usize)> {
        let k = self.branch_at(cell, a)?;
        let br = &self.branches[k];
        let d = match br.kind {
            BranchKind::Intermittent => crate::intermittent::phi_derivative(a, &self.intermittent),
            BranchKind::Affine => br.expansion(self),
        };
        Ok((br.target, self.forward_unstable(br, a)?, d, k))
    }

    /// Preimage of unstable coordinate `a` of the target cell under `branch`,
    /// with the branch derivative at that preimage.
    pub fn unstable_preimage(&self, branch: usize, a: f64) -> Result<(f64, f64)> {
        let br = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::Domain(format!("no branch {branch}")))?;
        let t = &self.cells[br.target];
        if !(a >= t.u.0 && a <= t.u.1) {
            return Err(Error::Domain(format!(
                "unstable coordinate {a} outside cell {}",
                br.target
            )));
        }
        let pre = self.backward_unstable(br, a)?;
        let d = match br.kind {
            BranchKind::Intermittent => {
                crate::intermittent::phi_derivative(pre, &self.intermittent)
            }
            BranchKind::Affine => br.expansion(self),
        };
        Ok((pre, d))
    }

    /// Max-norm in a cell chart; points in different cells are at the fixed
    /// distance `span`, the extent of all charts together.
    pub fn distance(&self, x: Point2, y: Point2) -> f64 {
        if x.cell != y.cell {
            self.span
        } else {
            (x.a - y.a).abs().max((x.b - y.b).abs())
        }
    }

    pub fn span(&self) -> f64 {
        self.span
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Forward iterates of two points on one stable leaf.
    Forward,
    /// Backward iterates of two points on one unstable leaf.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// `r_k = d_k · k^{τ+1} / d_0` for `k = 1..=n`.
    pub ratios: Vec<f64>,
    pub running_sup: Vec<f64>,
    pub distances: Vec<f64>,
}

impl ContractionReport {
    pub fn sup(&self) -> f64 {
        self.running_sup.last().copied().unwrap_or(0.0)
    }
}

/// Polynomial contraction envelope along a common leaf.
pub fn check_contraction(
    x: Point2,
    y: Point2,
    n: usize,
    dir: Direction,
    m: &HyperbolicModel,
) -> Result<ContractionReport> {
    match dir {
        Direction::Forward if x.cell != y.cell || x.a != y.a => {
            return Err(Error::LeafMismatch("stable"))
        }
        Direction::Backward if x.cell != y.cell || x.b != y.b => {
            return Err(Error::LeafMismatch("unstable"))
        }
        _ => {}
    }
    let alpha = m.intermittent.tau + 1.0;
    let d0 = m.distance(x, y);
    let (mut px, mut py) = (x, y);
    let mut report = ContractionReport {
        ratios: Vec::with_capacity(n),
        running_sup: Vec::with_capacity(n),
        distances: Vec::with_capacity(n),
    };
    let mut sup = 0.0_f64;
    for k in 1..=n {
        if d0 > 0.0 {
            (px, py) = match dir {
                Direction::Forward => (m.step(px)?, m.step(py)?),
                Direction::Backward => (m.step_inverse(px)?, m.step_inverse(py)?),
            };
        }
        let d = if d0 > 0.0 { m.distance(px, py) } else { 0.0 };
        let r = if d0 > 0.0 {
            d * (k as f64).powf(alpha) / d0
        } else {
            0.0
        };
        sup = sup.max(r);
        report.distances.push(d);
        report.ratios.push(r);
        report.running_sup.push(sup);
    }
    Ok(report)
}
