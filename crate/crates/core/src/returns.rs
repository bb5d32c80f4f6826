//! Level times in `W0`, the composed return time `R` to the base cell `W1`,
//! return cylinders, separation times and tail statistics.

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::fit::{ols, percentile, BOOTSTRAP_RESAMPLES};
use crate::intermittent::{boundary_sequence, BoundarySequence, Side};
use crate::model::{HyperbolicModel, Point2};
use crate::rng::{par_chunks, stream, DEFAULT_CHUNK};

/// Index of the base cell `Λ`.
pub const BASE_CELL: usize = 1;

pub const DEFAULT_CAP: u64 = 1_000_000;

/// Tabulated boundary sequences on both sides of the neutral point.
#[derive(Debug, Clone)]
pub struct LevelTable {
    pub right: BoundarySequence,
    pub left: BoundarySequence,
}

impl LevelTable {
    pub fn new(m: &HyperbolicModel, depth: usize) -> Result<Self> {
        let p = m.params();
        if !m.is_intermittent() {
            return Ok(LevelTable {
                right: BoundarySequence {
                    values: vec![p.a0],
                    side: Side::Right,
                },
                left: BoundarySequence {
                    values: vec![p.a0_prime],
                    side: Side::Left,
                },
            });
        }
        let mut p = p.clone();
        p.max_seq_len = p.max_seq_len.max(depth);
        Ok(LevelTable {
            right: boundary_sequence(&p, Side::Right, depth)?,
            left: boundary_sequence(&p, Side::Left, depth)?,
        })
    }

    /// Number of tabulated levels.
    pub fn depth(&self) -> usize {
        self.right.len().min(self.left.len()).saturating_sub(1)
    }

    /// `n` with `a ∈ J_n ∪ J′_n`.
    pub fn level(&self, a: f64) -> Result<usize> {
        let seq = if a >= 0.0 { &self.right } else { &self.left };
        match seq.level_of(a) {
            Some(n) => Ok(n),
            None if a.abs() > seq.values[0].abs() => Err(Error::Domain(format!("{a} outside W0"))),
            None => Err(Error::SequenceExhausted(seq.len())),
        }
    }
}

/// Steps needed to leave `W0`: `n + 1` on `J_n`, and 1 off `W0`.
pub fn rhat(p: Point2, m: &HyperbolicModel, table: &LevelTable) -> Result<u64> {
    m.validate(p)?;
    if p.cell != 0 || !m.is_intermittent() {
        return Ok(1);
    }
    Ok(table.level(p.a)? as u64 + 1)
}

/// Cheap summary of one return to the base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Return {
    pub r: u64,
    pub endpoint: Point2,
    /// `log` of the unstable derivative of `f^R`.
    pub log_du: f64,
    /// Hash of the branch itinerary; equal cylinders have equal ids.
    pub cylinder: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnRecord {
    pub rhat_sequence: Vec<u64>,
    pub r: u64,
    /// Cell reached at each partial time in `rhat_sequence`.
    pub visits: Vec<usize>,
    pub itinerary: Vec<u32>,
    pub summary: Return,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

#[inline]
fn mix(h: u64, branch: usize) -> u64 {
    (h ^ branch as u64).wrapping_mul(FNV_PRIME)
}

fn cap_error(e: Error, table: &LevelTable, cap: u64) -> Error {
    match e {
        Error::SequenceExhausted(_) if table.depth() as u64 >= cap => Error::CapExceeded(cap),
        other => other,
    }
}

type Visitor<'v> = &'v mut dyn FnMut(u64, Point2);

fn run_return(
    x: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    cap: u64,
    mut record: Option<&mut ReturnRecord>,
    mut visit: Option<Visitor<'_>>,
) -> Result<Return> {
    if x.cell != BASE_CELL {
        return Err(Error::NotInBase);
    }
    m.validate(x)?;
    let n0 = m.n0 as u64;
    let mut y = x;
    let mut t = 0u64;
    let mut log_du = 0.0;
    let mut h = FNV_OFFSET;
    loop {
        let k = rhat(y, m, table).map_err(|e| cap_error(e, table, cap))? - 1 + n0;
        if t + k > cap {
            return Err(Error::CapExceeded(cap));
        }
        for j in 0..k {
            if let Some(v) = visit.as_mut() {
                v(t + j, y);
            }
            let (next, branch, du) = m.step_with_derivative(y)?;
            log_du += du.ln();
            h = mix(h, branch);
            if let Some(rec) = record.as_deref_mut() {
                rec.itinerary.push(branch as u32);
            }
            y = next;
        }
        t += k;
        if let Some(rec) = record.as_deref_mut() {
            rec.rhat_sequence.push(t);
            rec.visits.push(y.cell);
        }
        if y.cell == BASE_CELL {
            return Ok(Return {
                r: t,
                endpoint: y,
                log_du,
                cylinder: mix(h, t as usize),
            });
        }
    }
}

/// First return to the base with only the summary kept.
pub fn first_return(
    x: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    cap: u64,
) -> Result<Return> {
    run_return(x, m, table, cap, None, None)
}

/// As [`first_return`], calling `visit(l, f^l x)` for every level `l < R`.
pub fn first_return_visit(
    x: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    cap: u64,
    visit: &mut dyn FnMut(u64, Point2),
) -> Result<Return> {
    run_return(x, m, table, cap, None, Some(visit))
}

/// First return to the base with the level-time recursion recorded.
pub fn return_time(
    x: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    cap: u64,
) -> Result<ReturnRecord> {
    let mut rec = ReturnRecord {
        rhat_sequence: Vec::new(),
        r: 0,
        visits: Vec::new(),
        itinerary: Vec::new(),
        summary: Return {
            r: 0,
            endpoint: x,
            log_du: 0.0,
            cylinder: 0,
        },
    };
    let summary = run_return(x, m, table, cap, Some(&mut rec), None)?;
    rec.r = summary.r;
    rec.summary = summary;
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeparationTime {
    pub s: u64,
    pub at_cap: bool,
}

/// Number of synchronized returns before `x` and `y` fall in different
/// return cylinders.
pub fn separation_time(
    x: Point2,
    y: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    max_returns: u64,
    cap: u64,
) -> Result<SeparationTime> {
    if x.cell != BASE_CELL || y.cell != BASE_CELL {
        return Err(Error::NotInBase);
    }
    let (mut px, mut py) = (x, y);
    for s in 0..max_returns {
        let rx = first_return(px, m, table, cap)?;
        let ry = first_return(py, m, table, cap)?;
        if rx.cylinder != ry.cylinder {
            return Ok(SeparationTime { s, at_cap: false });
        }
        px = rx.endpoint;
        py = ry.endpoint;
    }
    Ok(SeparationTime {
        s: max_returns,
        at_cap: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSample {
    /// `|log (f^R)′_u(x) − log (f^R)′_u(y)|`.
    pub log_ratio: f64,
    pub separation: SeparationTime,
    pub image_distance: f64,
    pub same_cylinder: bool,
}

/// Distortion of the return map between two points of one unstable leaf of
/// the base, with the separation time of their images.
pub fn distortion_check(
    x: Point2,
    y: Point2,
    m: &HyperbolicModel,
    table: &LevelTable,
    max_returns: u64,
    cap: u64,
) -> Result<DistortionSample> {
    if x.cell != BASE_CELL || y.cell != BASE_CELL {
        return Err(Error::NotInBase);
    }
    if x.b != y.b {
        return Err(Error::LeafMismatch("unstable"));
    }
    let rx = first_return(x, m, table, cap)?;
    let ry = first_return(y, m, table, cap)?;
    let separation = separation_time(rx.endpoint, ry.endpoint, m, table, max_returns, cap)?;
    Ok(DistortionSample {
        log_ratio: (rx.log_du - ry.log_du).abs(),
        separation,
        image_distance: m.distance(rx.endpoint, ry.endpoint),
        same_cylinder: rx.cylinder == ry.cylinder,
    })
}

/// Fits `value ≈ C·β^s` by regressing `log value` on `s`; zero values are
/// ignored. Returns `(C, β)`.
pub fn fit_geometric(samples: &[(f64, u64)]) -> Option<(f64, f64)> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .filter(|(v, _)| *v > 0.0)
        .map(|&(v, s)| (s as f64, v.ln()))
        .unzip();
    let (slope, intercept) = ols(&xs, &ys)?;
    Some((intercept.exp(), slope.exp()))
}

/// Histogram of return times; `counts[r]` is the number of samples with `R = r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReturnHistogram {
    pub counts: Vec<u64>,
    /// Samples with `R > cap`.
    pub censored: u64,
    /// Samples that hit a branch boundary exactly.
    pub ties: u64,
    pub cap: u64,
}

impl ReturnHistogram {
    pub fn new(cap: u64) -> Self {
        ReturnHistogram {
            cap,
            ..Default::default()
        }
    }

    pub fn record(&mut self, r: u64) {
        let r = r as usize;
        if self.counts.len() <= r {
            self.counts.resize(r + 1, 0);
        }
        self.counts[r] += 1;
    }

    pub fn merge(&mut self, other: &ReturnHistogram) {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.censored += other.censored;
        self.ties += other.ties;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.censored
    }

    /// Number of samples with `R > n`, censored ones included.
    pub fn exceeding(&self, n: u64) -> u64 {
        let from = (n as usize + 1).min(self.counts.len());
        self.counts[from..].iter().sum::<u64>() + self.censored
    }

    pub fn mean(&self) -> f64 {
        let uncensored: u64 = self.counts.iter().sum();
        self.counts
            .iter()
            .enumerate()
            .map(|(r, &c)| r as f64 * c as f64)
            .sum::<f64>()
            / uncensored as f64
    }

    /// Greatest common divisor of the observed return times.
    pub fn gcd(&self) -> u64 {
        fn gcd(a: u64, b: u64) -> u64 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .fold(0, |g, (r, _)| gcd(g, r as u64))
    }
}

/// Return times of `samples` points drawn uniformly on the reference
/// unstable leaf through the center of the base.
pub fn sample_returns(
    m: &HyperbolicModel,
    table: &LevelTable,
    samples: usize,
    seed: u64,
    cap: u64,
) -> Result<ReturnHistogram> {
    let base = m.cells[BASE_CELL];
    let b = base.center().1;
    let parts = par_chunks(
        seed,
        samples,
        DEFAULT_CHUNK * 4,
        |rng, _, len| -> Result<ReturnHistogram> {
            let mut h = ReturnHistogram::new(cap);
            for _ in 0..len {
                let a = rng.gen_range(base.u.0..base.u.1);
                match first_return(Point2::new(BASE_CELL, a, b), m, table, cap) {
                    Ok(ret) => h.record(ret.r),
                    Err(Error::CapExceeded(_)) => h.censored += 1,
                    Err(Error::BoundaryTie { .. }) => h.ties += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok(h)
        },
    );
    let mut out = ReturnHistogram::new(cap);
    for part in parts {
        out.merge(&part?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    /// `(n, #{R > n})` for `n = 0..=max observed R`.
    pub survival: Vec<(u64, u64)>,
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub window: (u64, u64),
    pub sample_size: u64,
    pub censored: u64,
}

/// Log-spaced integer abscissae in `[lo, hi]`.
pub fn log_grid(lo: u64, hi: u64, points: usize) -> Vec<u64> {
    let (l, h) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<u64> = (0..points)
        .map(|k| (l + (h - l) * k as f64 / (points - 1) as f64).exp().round() as u64)
        .collect();
    out.dedup();
    out
}

fn survival_slope(grid: &[u64], exceed: &[u64], total: u64) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .zip(exceed)
        .filter(|(_, &e)| e > 0)
        .map(|(&n, &e)| ((n as f64).ln(), (e as f64 / total as f64).ln()))
        .unzip();
    ols(&xs, &ys).map(|(s, _)| s)
}

/// Survival function of `R` and its log-log slope over `window`, with a
/// multinomial bootstrap interval.
pub fn tail_histogram(
    hist: &ReturnHistogram,
    window: (u64, u64),
    seed: u64,
) -> Result<TailEstimate> {
    let total = hist.total();
    if total < 10_000 {
        return Err(Error::InsufficientSamples(format!(
            "{total} return samples, need 10000"
        )));
    }
    let (lo, hi) = window;
    if lo == 0 || hi <= lo {
        return Err(Error::DegenerateWindow(format!("[{lo}, {hi}]")));
    }
    let distinct = (lo..=hi)
        .filter(|&r| hist.counts.get(r as usize).is_some_and(|&c| c > 0))
        .count();
    if distinct < 10 {
        return Err(Error::DegenerateSupport(format!(
            "{distinct} distinct return times in [{lo}, {hi}]"
        )));
    }

    let grid = log_grid(lo, hi, 40);
    let exceed: Vec<u64> = grid.iter().map(|&n| hist.exceeding(n)).collect();
    let slope = survival_slope(&grid, &exceed, total)
        .ok_or_else(|| Error::DegenerateSupport("survival vanishes on the window".into()))?;

    // Group counts between grid points; a multinomial draw over the groups
    // resamples every survival value at once.
    let mut groups = Vec::with_capacity(grid.len() + 1);
    groups.push(total - exceed[0]);
    for w in exceed.windows(2) {
        groups.push(w[0] - w[1]);
    }
    groups.push(*exceed.last().unwrap());
    let probs: Vec<f64> = groups.iter().map(|&g| g as f64 / total as f64).collect();

    let mut rng = stream(seed, 0x7a11);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut remaining = total;
        let mut mass = 1.0;
        let mut drawn = Vec::with_capacity(probs.len());
        for (k, &p) in probs.iter().enumerate() {
            let c = if k + 1 == probs.len() || mass <= 0.0 {
                remaining
            } else {
                let q = (p / mass).clamp(0.0, 1.0);
                Binomial::new(remaining, q)
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(0)
            };
            drawn.push(c);
            remaining -= c;
            mass -= p;
        }
        let mut tail = 0u64;
        let mut ex = vec![0u64; grid.len()];
        for k in (0..grid.len()).rev() {
            tail += drawn[k + 1];
            ex[k] = tail;
        }
        if let Some(s) = survival_slope(&grid, &ex, total) {
            boot.push(s);
        }
    }
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        (slope, slope)
    } else {
        (
            percentile(&boot, 0.025).min(slope),
            percentile(&boot, 0.975).max(slope),
        )
    };

    let max_r = hist.counts.iter().rposition(|&c| c > 0).unwrap_or(0) as u64;
    let mut survival = Vec::with_capacity(max_r as usize + 1);
    let mut above = total;
    for n in 0..=max_r {
        above -= hist.counts.get(n as usize).copied().unwrap_or(0);
        survival.push((n, above));
    }
    Ok(TailEstimate {
        survival,
        slope,
        slope_ci: ci,
        window,
        sample_size: total,
        censored: hist.censored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (HyperbolicModel, LevelTable) {
        let m = HyperbolicModel::build(&ModelConfig::default()).unwrap();
        let t = LevelTable::new(&m, 100_000).unwrap();
        (m, t)
    }

    #[test]
    fn level_times() {
        let (m, t) = setup();
        assert_eq!(rhat(Point2::new(2, 0.3, 0.4), &m, &t).unwrap(), 1);
        let a = 0.5 * (t.right.values[5] + t.right.values[6]);
        assert_eq!(rhat(Point2::new(0, a, 0.1), &m, &t).unwrap(), 6);
        let a = 0.5 * (t.left.values[0] + t.left.values[1]);
        assert_eq!(rhat(Point2::new(0, a, 0.1), &m, &t).unwrap(), 1);
        assert!(matches!(
            rhat(Point2::new(0, 0.0, 0.1), &m, &t),
            Err(Error::SequenceExhausted(_))
        ));
    }

    #[test]
    fn level_time_counts_steps_in_w0() {
        let (m, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let a: f64 = rng.gen_range(-0.5..0.5);
            let p = Point2::new(0, a, 0.2);
            let k = rhat(p, &m, &t).unwrap();
            let mut y = p;
            for _ in 0..k - 1 {
                y = m.step(y).unwrap();
                assert_eq!(y.cell, 0);
            }
            assert_ne!(m.step(y).unwrap().cell, 0);
        }
    }

    #[test]
    fn immediate_return() {
        let (m, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = false;
        for _ in 0..200 {
            let x = Point2::new(1, rng.gen_range(0.0..1.0), 0.5);
            let rec = return_time(x, &m, &t, DEFAULT_CAP).unwrap();
            if m.step(x).unwrap().cell == 1 {
                assert_eq!(rec.r, m.n0 as u64);
                seen = true;
            }
            let first = m.step(x).unwrap();
            if first.cell == 0 {
                let k = t.level(first.a).unwrap() as u64;
                assert!(rec.r >= m.n0 as u64 + k);
            }
        }
        assert!(seen);
    }

    #[test]
    fn recursion_matches_single_steps() {
        let (m, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let x = Point2::new(1, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let rec = return_time(x, &m, &t, DEFAULT_CAP).unwrap();
            assert_eq!(*rec.rhat_sequence.last().unwrap(), rec.r);
            assert_eq!(*rec.visits.last().unwrap(), BASE_CELL);
            let mut y = x;
            let mut time = 0;
            for (&stop, &cell) in rec.rhat_sequence.iter().zip(&rec.visits) {
                while time < stop {
                    y = m.step(y).unwrap();
                    time += 1;
                }
                assert_eq!(y.cell, cell);
            }
            assert_eq!(y, rec.summary.endpoint);
            for w in rec.rhat_sequence.windows(2) {
                assert!(w[1] >= w[0] + m.n0 as u64);
            }
        }
    }

    #[test]
    fn rejects_points_off_base() {
        let (m, t) = setup();
        assert!(matches!(
            return_time(Point2::new(2, 0.5, 0.5), &m, &t, 10),
            Err(Error::NotInBase)
        ));
    }

    #[test]
    fn separation_examples() {
        let (m, t) = setup();
        let x = Point2::new(1, 0.123, 0.5);
        let st = separation_time(x, x, &m, &t, 50, DEFAULT_CAP).unwrap();
        assert_eq!(
            st,
            SeparationTime {
                s: 50,
                at_cap: true
            }
        );
        // Points in different first-step branches separate at once.
        let pieces = m.branches_from(1);
        let a0 = m.branches[pieces[0]].u_lo
            + 0.3 * (m.branches[pieces[0]].u_hi - m.branches[pieces[0]].u_lo);
        let a1 = 0.5 * (m.branches[pieces[2]].u_lo + m.branches[pieces[2]].u_hi);
        let st = separation_time(
            Point2::new(1, a0, 0.5),
            Point2::new(1, a1, 0.5),
            &m,
            &t,
            50,
            DEFAULT_CAP,
        )
        .unwrap();
        assert_eq!(st.s, 0);
        // Two close points of one cylinder whose images fall in different cylinders.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut found = false;
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(0.0..0.99);
            let x = Point2::new(1, a, 0.5);
            let y = Point2::new(1, a + 1e-3, 0.5);
            if separation_time(x, y, &m, &t, 50, DEFAULT_CAP).unwrap().s == 1 {
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn affine_orbits_have_no_distortion() {
        let (m, t) = setup();
        // W1 -> W1 self branch: both points return after one affine step.
        let k = m
            .branches_from(1)
            .iter()
            .copied()
            .find(|&k| m.branches[k].target == 1)
            .unwrap();
        let br = &m.branches[k];
        let x = Point2::new(1, br.u_lo + 0.3 * (br.u_hi - br.u_lo), 0.5);
        let y = Point2::new(1, br.u_lo + 0.6 * (br.u_hi - br.u_lo), 0.5);
        let d = distortion_check(x, y, &m, &t, 100, DEFAULT_CAP).unwrap();
        assert_eq!(d.log_ratio, 0.0);
        assert!(d.same_cylinder);
        let d = distortion_check(x, x, &m, &t, 100, DEFAULT_CAP).unwrap();
        assert_eq!(d.log_ratio, 0.0);
        assert!(matches!(
            distortion_check(x, Point2::new(1, 0.2, 0.3), &m, &t, 100, DEFAULT_CAP),
            Err(Error::LeafMismatch(_))
        ));
    }

    #[test]
    fn mean_return_time_stabilizes() {
        let (m, t) = setup();
        let small = sample_returns(&m, &t, 50_000, 1, DEFAULT_CAP).unwrap();
        let large = sample_returns(&m, &t, 400_000, 2, DEFAULT_CAP).unwrap();
        assert_eq!(small.ties + large.ties, 0);
        let (a, b) = (small.mean(), large.mean());
        assert!(a.is_finite() && (a - b).abs() / b < 0.05, "{a} vs {b}");
        assert_eq!(large.gcd(), 1);
    }

    #[test]
    fn worker_count_does_not_change_histogram() {
        let (m, t) = setup();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_returns(&m, &t, 40_000, 9, DEFAULT_CAP).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    /// `R = ceil(U^{-1/3})` has `P{R > n} = n^{-3}` at integers.
    fn synthetic_cubic(samples: usize, seed: u64) -> ReturnHistogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = ReturnHistogram::new(u64::MAX);
        for _ in 0..samples {
            let u: f64 = 1.0 - rng.gen::<f64>();
            h.record(u.powf(-1.0 / 3.0).ceil() as u64);
        }
        h
    }

    #[test]
    fn synthetic_tail_slope() {
        let h = synthetic_cubic(10_000_000, 17);
        let est = tail_histogram(&h, (2, 40), 1).unwrap();
        assert!((est.slope + 3.0).abs() < 0.05, "slope {}", est.slope);
        assert!(est.slope_ci.0 <= est.slope && est.slope <= est.slope_ci.1);
        assert!(est.survival.windows(2).all(|w| w[1].1 <= w[0].1));
        assert_eq!(est.survival[0].1, 10_000_000);
    }

    #[test]
    fn tail_errors() {
        let mut h = ReturnHistogram::new(100);
        for _ in 0..20_000 {
            h.record(7);
        }
        assert!(matches!(
            tail_histogram(&h, (2, 40), 1),
            Err(Error::DegenerateSupport(_))
        ));
        let small = synthetic_cubic(100, 1);
        assert!(matches!(
            tail_histogram(&small, (2, 40), 1),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn histogram_bookkeeping() {
        let mut h = ReturnHistogram::new(10);
        for r in [1, 1, 2, 5] {
            h.record(r);
        }
        h.censored = 1;
        assert_eq!(h.total(), 5);
        assert_eq!(h.exceeding(1), 3);
        assert_eq!(h.exceeding(5), 1);
        assert_eq!(h.exceeding(50), 1);
        let mut g = ReturnHistogram::new(10);
        g.record(9);
        h.merge(&g);
        assert_eq!(h.exceeding(5), 2);
    }

    #[test]
    fn geometric_fit_recovers_rate() {
        let samples: Vec<(f64, u64)> = (0..20).map(|s| (3.0 * 0.6f64.powi(s as i32), s)).collect();
        let (c, beta) = fit_geometric(&samples).unwrap();
        assert!((c - 3.0).abs() < 1e-9 && (beta - 0.6).abs() < 1e-12);
    }
}
