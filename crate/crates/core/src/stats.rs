//! Orbit simulation, correlation estimators (long-orbit Monte Carlo and
//! transfer-matrix powers), large-deviation frequencies and Hölder
//! seminorms.

use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ConfigIssue, Error, Result};
use crate::fit::t975;
use crate::model::{HyperbolicModel, Point2};
use crate::observables::Observable;
use crate::returns::{LevelTable, BASE_CELL};
use crate::rng::stream;
use crate::tower::density::invariant_density;
use crate::tower::{ulam_discretize, TransferMatrix, UlamGrid, UlamRegistry};

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn merge(&mut self, o: &Neumaier) {
        self.add(o.sum);
        self.add(o.comp);
    }
}

/// Uniform random point of the base cell.
pub fn random_base_point(m: &HyperbolicModel, rng: &mut impl Rng) -> Point2 {
    let r = &m.cells[BASE_CELL];
    Point2::new(
        BASE_CELL,
        r.u.0 + rng.gen::<f64>() * r.width(),
        r.s.0 + rng.gen::<f64>() * r.height(),
    )
}

/// Starting point: `p0` if given, else a seeded random point of the base.
pub fn start_point(m: &HyperbolicModel, seed: u64, p0: Option<Point2>) -> Point2 {
    p0.unwrap_or_else(|| random_base_point(m, &mut stream(seed, u64::MAX)))
}

/// Streaming summary of observables along one orbit, in equal batches.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSummary {
    pub steps: u64,
    pub last: Point2,
    /// `batch_means[k][j]`: mean of observable `k` over batch `j`.
    pub batch_means: Vec<Vec<f64>>,
}

impl OrbitSummary {
    pub fn mean(&self, k: usize) -> f64 {
        let b = &self.batch_means[k];
        b.iter().sum::<f64>() / b.len() as f64
    }

    /// Batch-means standard error of observable `k`.
    pub fn std_error(&self, k: usize) -> f64 {
        let b = &self.batch_means[k];
        let n = b.len() as f64;
        let mu = self.mean(k);
        (b.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    }
}

/// Runs `n` steps after `burn_in`, averaging each observable over `batches`
/// equal batches.
pub fn simulate_orbit(
    m: &HyperbolicModel,
    p0: Point2,
    n: u64,
    burn_in: u64,
    batches: usize,
    observables: &[&dyn Observable],
) -> Result<OrbitSummary> {
    m.validate(p0)?;
    let mut x = p0;
    for _ in 0..burn_in {
        x = m.step(x)?;
    }
    let batches = batches.max(1).min(n.max(1) as usize);
    let mut means = vec![Vec::with_capacity(batches); observables.len()];
    if n == 0 {
        return Ok(OrbitSummary {
            steps: 0,
            last: x,
            batch_means: vec![Vec::new(); observables.len()],
        });
    }
    let per = n / batches as u64;
    for j in 0..batches {
        let len = if j + 1 == batches {
            n - per * j as u64
        } else {
            per
        };
        let mut acc = vec![Neumaier::default(); observables.len()];
        for _ in 0..len {
            for (k, o) in observables.iter().enumerate() {
                acc[k].add(o.eval(m, x));
            }
            x = m.step(x)?;
        }
        for k in 0..observables.len() {
            means[k].push(acc[k].value() / len as f64);
        }
    }
    Ok(OrbitSummary {
        steps: n,
        last: x,
        batch_means: means,
    })
}

/// Observable values along an orbit, for short runs.
pub fn orbit_values(
    m: &HyperbolicModel,
    p0: Point2,
    n: u64,
    burn_in: u64,
    o: &dyn Observable,
) -> Result<Vec<f64>> {
    let mut x = p0;
    for _ in 0..burn_in {
        x = m.step(x)?;
    }
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        out.push(o.eval(m, x));
        x = m.step(x)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MonteCarlo,
    Spectral,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::MonteCarlo => "monte_carlo",
            Method::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub n_values: Vec<u64>,
    /// `|∫ φ∘fⁿ·ψ − ∫φ ∫ψ|`.
    pub c_values: Vec<f64>,
    /// The covariance before taking absolute values.
    pub signed: Vec<f64>,
    /// 95% half-widths.
    pub ci: Option<Vec<f64>>,
    pub method: Method,
}

/// Long-orbit sampling parameters.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub chains: usize,
    /// Recorded steps per chain.
    pub length: u64,
    pub burn_in: u64,
    pub batches_per_chain: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            chains: 16,
            length: 1_000_000,
            burn_in: 100_000,
            batches_per_chain: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Default)]
struct LagSums {
    xy: Neumaier,
    x: Neumaier,
    y: Neumaier,
    count: u64,
}

impl LagSums {
    fn estimate(&self) -> f64 {
        let n = self.count as f64;
        let (mx, my) = (self.x.value() / n, self.y.value() / n);
        self.xy.value() / n - mx * my
    }

    fn merge(&mut self, o: &LagSums) {
        self.xy.merge(&o.xy);
        self.x.merge(&o.x);
        self.y.merge(&o.y);
        self.count += o.count;
    }
}

/// `|∫ φ∘fⁿ·ψ dμ − ∫φ ∫ψ|` from long orbits, with batch-means intervals.
///
/// Values are shifted by their value at the centre of the base before
/// accumulating, so a constant observable contributes exact zeros.
pub fn correlation_mc(
    m: &HyperbolicModel,
    phi: &dyn Observable,
    psi: &dyn Observable,
    n_values: &[u64],
    cfg: &ChainConfig,
    ci_tol: Option<f64>,
) -> Result<CorrelationSeries> {
    let max_n = n_values.iter().copied().max().unwrap_or(0) as usize;
    if cfg.chains == 0
        || cfg.batches_per_chain == 0
        || cfg.length < (max_n as u64 + 1) * cfg.batches_per_chain as u64
    {
        return Err(
            ConfigIssue::Parameter("chains too short for the requested lags".into()).into(),
        );
    }
    let centre = {
        let r = &m.cells[BASE_CELL];
        let (a, b) = r.center();
        Point2::new(BASE_CELL, a, b)
    };
    let (shift_phi, shift_psi) = (phi.eval(m, centre), psi.eval(m, centre));
    let ring_len = max_n + 1;

    let per_chain: Vec<Result<Vec<Vec<LagSums>>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(cfg.seed, c as u64);
            let mut x = random_base_point(m, &mut rng);
            for _ in 0..cfg.burn_in {
                x = m.step(x)?;
            }
            let mut ring = vec![0.0; ring_len];
            let per = cfg.length / cfg.batches_per_chain as u64;
            let mut out = Vec::with_capacity(cfg.batches_per_chain);
            let mut t = 0u64;
            for j in 0..cfg.batches_per_chain {
                let len = if j + 1 == cfg.batches_per_chain {
                    cfg.length - per * j as u64
                } else {
                    per
                };
                let mut sums = vec![LagSums::default(); n_values.len()];
                for _ in 0..len {
                    let fp = phi.eval(m, x) - shift_phi;
                    let sp = psi.eval(m, x) - shift_psi;
                    ring[(t as usize) % ring_len] = sp;
                    for (k, &n) in n_values.iter().enumerate() {
                        if t >= n {
                            let past = ring[((t - n) as usize) % ring_len];
                            let s = &mut sums[k];
                            s.xy.add(past * fp);
                            s.x.add(past);
                            s.y.add(fp);
                            s.count += 1;
                        }
                    }
                    x = m.step(x)?;
                    t += 1;
                }
                out.push(sums);
            }
            Ok(out)
        })
        .collect();

    let mut batches = Vec::new();
    for r in per_chain {
        batches.extend(r?);
    }
    let nb = batches.len();
    let mut signed = Vec::with_capacity(n_values.len());
    let mut ci = Vec::with_capacity(n_values.len());
    for k in 0..n_values.len() {
        let mut pooled = LagSums::default();
        let ests: Vec<f64> = batches
            .iter()
            .map(|b| {
                pooled.merge(&b[k]);
                b[k].estimate()
            })
            .collect();
        let mean = ests.iter().sum::<f64>() / nb as f64;
        let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (nb as f64 - 1.0).max(1.0);
        let hw = t975((nb as f64 - 1.0).max(1.0)) * (var / nb as f64).sqrt();
        if let Some(tol) = ci_tol {
            if hw > tol {
                return Err(Error::InsufficientSamples(format!(
                    "lag {}: half-width {hw:.3e} exceeds {tol:.3e}",
                    n_values[k]
                )));
            }
        }
        signed.push(pooled.estimate());
        ci.push(hw);
    }
    Ok(CorrelationSeries {
        n_values: n_values.to_vec(),
        c_values: signed.iter().map(|c| c.abs()).collect(),
        signed,
        ci: Some(ci),
        method: Method::MonteCarlo,
    })
}

/// Mean of `v` under weights `w`, exact when `v` is constant.
fn weighted_mean(v: &[f64], w: &[f64]) -> f64 {
    let shift = v[0];
    let (mut num, mut den) = (Neumaier::default(), Neumaier::default());
    for (x, p) in v.iter().zip(w) {
        num.add(p * (x - shift));
        den.add(*p);
    }
    shift + num.value() / den.value()
}

/// Correlations from powers of the transfer matrix:
/// `Σ_s ρ(s)·ψ̃(s)·(Pⁿφ̃)(s)` with `ψ̃, φ̃` centred under `ρ`.
pub fn correlation_spectral(
    p: &TransferMatrix,
    rho: &[f64],
    phi: &[f64],
    psi: &[f64],
    n_values: &[u64],
) -> Result<CorrelationSeries> {
    for len in [rho.len(), phi.len(), psi.len()] {
        if len != p.len() {
            return Err(Error::ShapeMismatch {
                expected: p.len(),
                got: len,
            });
        }
    }
    let mp = weighted_mean(phi, rho);
    let ms = weighted_mean(psi, rho);
    let mut f: Vec<f64> = phi.iter().map(|x| x - mp).collect();
    let weight: Vec<f64> = psi.iter().zip(rho).map(|(x, r)| (x - ms) * r).collect();
    let mut order: Vec<usize> = (0..n_values.len()).collect();
    order.sort_by_key(|&i| n_values[i]);
    let mut signed = vec![0.0; n_values.len()];
    let mut power = 0u64;
    for i in order {
        while power < n_values[i] {
            f = p.apply(&f);
            power += 1;
        }
        let mut acc = Neumaier::default();
        for (w, v) in weight.iter().zip(&f) {
            acc.add(w * v);
        }
        signed[i] = acc.value();
    }
    Ok(CorrelationSeries {
        n_values: n_values.to_vec(),
        c_values: signed.iter().map(|c| c.abs()).collect(),
        signed,
        ci: None,
        method: Method::Spectral,
    })
}

/// Everything a correlation estimator may need.
pub struct CorrelationContext<'a> {
    pub model: &'a HyperbolicModel,
    pub table: &'a LevelTable,
    pub chains: ChainConfig,
    pub grid: UlamGrid,
    pub scheme: String,
}

pub trait CorrelationEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn estimate(
        &self,
        ctx: &CorrelationContext<'_>,
        phi: &dyn Observable,
        psi: &dyn Observable,
        n_values: &[u64],
    ) -> Result<CorrelationSeries>;
}

pub struct MonteCarloEstimator;

impl CorrelationEstimator for MonteCarloEstimator {
    fn name(&self) -> &'static str {
        "monte_carlo"
    }
    fn estimate(
        &self,
        ctx: &CorrelationContext<'_>,
        phi: &dyn Observable,
        psi: &dyn Observable,
        n_values: &[u64],
    ) -> Result<CorrelationSeries> {
        correlation_mc(ctx.model, phi, psi, n_values, &ctx.chains, None)
    }
}

/// Transfer-matrix estimator whose interval is the change when every bin
/// count of the grid is halved.
pub struct SpectralEstimator;

impl SpectralEstimator {
    fn series(
        ctx: &CorrelationContext<'_>,
        grid: &UlamGrid,
        phi: &dyn Observable,
        psi: &dyn Observable,
        n_values: &[u64],
    ) -> Result<CorrelationSeries> {
        if !phi.stable_invariant() || !psi.stable_invariant() {
            return Err(ConfigIssue::Parameter(
                "spectral correlations need observables constant on stable leaves".into(),
            )
            .into());
        }
        let scheme = UlamRegistry::default();
        let d = ulam_discretize(
            ctx.model,
            ctx.table,
            grid,
            scheme.get(&ctx.scheme)?,
            &[phi, psi],
        )?;
        let inv = invariant_density(&d.matrix)?;
        correlation_spectral(
            &d.matrix,
            &inv.rho,
            &d.observables[0],
            &d.observables[1],
            n_values,
        )
    }
}

impl CorrelationEstimator for SpectralEstimator {
    fn name(&self) -> &'static str {
        "spectral"
    }
    fn estimate(
        &self,
        ctx: &CorrelationContext<'_>,
        phi: &dyn Observable,
        psi: &dyn Observable,
        n_values: &[u64],
    ) -> Result<CorrelationSeries> {
        let mut fine = Self::series(ctx, &ctx.grid, phi, psi, n_values)?;
        let g = &ctx.grid;
        let coarse_grid = UlamGrid {
            bins: g.bins / 2,
            exit_bins: (g.exit_bins / 2).max(1),
            neutral_bins: (g.neutral_bins / 2).max(1),
            points_per_bin: g.points_per_bin / 2,
            seed: g.seed ^ 1,
            ..g.clone()
        };
        let coarse = Self::series(ctx, &coarse_grid, phi, psi, n_values)?;
        fine.ci = Some(
            fine.signed
                .iter()
                .zip(&coarse.signed)
                .map(|(a, b)| (a - b).abs())
                .collect(),
        );
        Ok(fine)
    }
}

pub struct EstimatorRegistry {
    entries: Vec<Box<dyn CorrelationEstimator>>,
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        EstimatorRegistry {
            entries: vec![Box::new(MonteCarloEstimator), Box::new(SpectralEstimator)],
        }
    }
}

impl EstimatorRegistry {
    pub fn register(&mut self, e: Box<dyn CorrelationEstimator>) {
        self.entries.retain(|x| x.name() != e.name());
        self.entries.push(e);
    }

    pub fn get(&self, name: &str) -> Result<&dyn CorrelationEstimator> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| {
                ConfigIssue::Parameter(format!("unknown correlation estimator '{name}'")).into()
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

/// Indices where two series differ by more than their combined half-widths,
/// with missing intervals read as zero and the 95% widths widened to a simultaneous 95% band over all entries.
pub fn disagreements(a: &CorrelationSeries, b: &CorrelationSeries) -> Vec<usize> {
    let m = a.signed.len().min(b.signed.len());
    let zero = vec![0.0; m];
    let (ca, cb) = (
        a.ci.as_ref().unwrap_or(&zero),
        b.ci.as_ref().unwrap_or(&zero),
    );
    let z95 = 1.959_963_984_540_054;
    let zm = Normal::standard().inverse_cdf(1.0 - 0.025 / m.max(1) as f64);
    let scale = zm / z95;
    (0..m)
        .filter(|&k| (a.signed[k] - b.signed[k]).abs() > scale * (ca[k] + cb[k]))
        .collect()
}

/// Wilson score interval for `hits` out of `n` at 95%.
pub fn wilson(hits: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = hits as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if hits == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if hits == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct LdConfig {
    pub ensemble: usize,
    /// Ensemble members taken from each chain.
    pub members_per_chain: usize,
    pub burn_in: u64,
    /// Spacing between member starts; at least the longest window.
    pub stride: u64,
    pub seed: u64,
}

impl Default for LdConfig {
    fn default() -> Self {
        LdConfig {
            ensemble: 100_000,
            members_per_chain: 1000,
            burn_in: 100_000,
            stride: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdSeries {
    pub eps: f64,
    pub n_values: Vec<u64>,
    pub ld: Vec<f64>,
    pub hits: Vec<u64>,
    pub ci: Vec<(f64, f64)>,
    pub ensemble: u64,
    /// Space average used as the centre.
    pub mean: f64,
}

/// Members whose time-`n` average misses the space average by more than `ε`.
///
/// Members are consecutive windows of long orbits. The space average is the
/// mean over all windows at their full length, so the count runs after all
/// windows have been generated.
pub fn large_deviation(
    m: &HyperbolicModel,
    phi: &dyn Observable,
    eps_list: &[f64],
    n_values: &[u64],
    cfg: &LdConfig,
) -> Result<Vec<LdSeries>> {
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    if max_n == 0 || cfg.ensemble == 0 || cfg.members_per_chain == 0 {
        return Err(Error::InsufficientSamples(
            "empty ensemble or window list".into(),
        ));
    }
    let stride = if cfg.stride == 0 { max_n } else { cfg.stride };
    if stride < max_n {
        return Err(
            ConfigIssue::Parameter(format!("stride {stride} shorter than window {max_n}")).into(),
        );
    }
    let chains = cfg.ensemble.div_ceil(cfg.members_per_chain);
    // sums[member][k] = Σ_{i<n_k} φ∘fⁱ
    let per_chain: Vec<Result<(Vec<Vec<f64>>, Neumaier, u64)>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let members = cfg
                .members_per_chain
                .min(cfg.ensemble - c * cfg.members_per_chain);
            let mut rng = stream(cfg.seed, c as u64);
            let mut x = random_base_point(m, &mut rng);
            for _ in 0..cfg.burn_in {
                x = m.step(x)?;
            }
            let mut out = Vec::with_capacity(members);
            let mut total = Neumaier::default();
            let mut count = 0;
            for _ in 0..members {
                let mut acc = Neumaier::default();
                let mut row = vec![0.0; n_values.len()];
                for i in 1..=stride {
                    x = if i <= max_n {
                        acc.add(phi.eval(m, x));
                        let next = m.step(x)?;
                        for (k, &n) in n_values.iter().enumerate() {
                            if n == i {
                                row[k] = acc.value();
                            }
                        }
                        next
                    } else {
                        m.step(x)?
                    };
                }
                total.add(acc.value());
                count += max_n;
                out.push(row);
            }
            Ok((out, total, count))
        })
        .collect();

    let mut sums = Vec::with_capacity(cfg.ensemble);
    let mut grand = Neumaier::default();
    let mut steps = 0u64;
    for r in per_chain {
        let (rows, tot, cnt) = r?;
        sums.extend(rows);
        grand.merge(&tot);
        steps += cnt;
    }
    let mean = grand.value() / steps as f64;
    let ens = sums.len() as u64;
    Ok(eps_list
        .iter()
        .map(|&eps| {
            let hits: Vec<u64> = n_values
                .iter()
                .enumerate()
                .map(|(k, &n)| {
                    sums.iter()
                        .filter(|row| (row[k] / n as f64 - mean).abs() > eps)
                        .count() as u64
                })
                .collect();
            LdSeries {
                eps,
                n_values: n_values.to_vec(),
                ld: hits.iter().map(|&h| h as f64 / ens as f64).collect(),
                ci: hits.iter().map(|&h| wilson(h, ens)).collect(),
                hits,
                ensemble: ens,
                mean,
            }
        })
        .collect())
}

/// `max |φ(x) − φ(y)| / d(x,y)^η` over the pairs.
pub fn holder_seminorm(
    m: &HyperbolicModel,
    phi: &dyn Observable,
    eta: f64,
    pairs: &[(Point2, Point2)],
) -> f64 {
    pairs
        .iter()
        .filter_map(|&(x, y)| {
            let d = m.distance(x, y);
            (d > 0.0).then(|| (phi.eval(m, x) - phi.eval(m, y)).abs() / d.powf(eta))
        })
        .fold(0.0, f64::max)
}

/// Pairs within one cell at separations log-uniform in `[lo, hi]`.
pub fn sample_pairs(
    m: &HyperbolicModel,
    count: usize,
    scales: (f64, f64),
    seed: u64,
) -> Vec<(Point2, Point2)> {
    let mut rng = stream(seed, 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cell = rng.gen_range(0..m.dim());
        let r = &m.cells[cell];
        let x = Point2::new(
            cell,
            r.u.0 + rng.gen::<f64>() * r.width(),
            r.s.0 + rng.gen::<f64>() * r.height(),
        );
        let d = (scales.0.ln() + rng.gen::<f64>() * (scales.1 / scales.0).ln()).exp();
        let ang = rng.gen::<f64>() * std::f64::consts::TAU;
        let y = Point2::new(cell, x.a + d * ang.cos(), x.b + d * ang.sin());
        if r.contains(y.a, y.b) {
            out.push((x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(signed: Vec<f64>, ci: Option<Vec<f64>>) -> CorrelationSeries {
        let n_values = (1..=signed.len() as u64).collect();
        CorrelationSeries {
            n_values,
            c_values: signed.iter().map(|v| v.abs()).collect(),
            signed,
            ci,
            method: Method::MonteCarlo,
        }
    }

    #[test]
    fn simultaneous_band_is_wider_than_pointwise() {
        // Gap of 1.2 combined half-widths: outside the pointwise band, inside
        // the band for ten simultaneous comparisons.
        let a = series(vec![0.0; 10], Some(vec![0.5; 10]));
        let mut gaps = vec![0.0; 10];
        gaps[3] = 1.2;
        assert!(disagreements(&a, &series(gaps.clone(), Some(vec![0.5; 10]))).is_empty());
        gaps[7] = 1.5;
        assert_eq!(
            disagreements(&a, &series(gaps, Some(vec![0.5; 10]))),
            vec![7]
        );
        assert_eq!(
            disagreements(&series(vec![0.0], None), &series(vec![1e-9], None)),
            vec![0]
        );
    }
    use crate::model::ModelConfig;
    use crate::observables::{Constant, Trig, UnstableCoordinate};

    fn model() -> HyperbolicModel {
        HyperbolicModel::build(&ModelConfig::default()).unwrap()
    }

    #[test]
    fn empty_and_fixed_orbits() {
        let m = model();
        let o = UnstableCoordinate;
        let s = simulate_orbit(&m, Point2::new(1, 0.3, 0.3), 0, 0, 4, &[&o]).unwrap();
        assert_eq!(s.steps, 0);
        assert!(s.batch_means[0].is_empty());
        let v = orbit_values(&m, Point2::new(0, 0.0, 0.0), 50, 0, &o).unwrap();
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn orbit_halves_agree() {
        let m = model();
        let o = Trig {
            freq: 1.0,
            sine: false,
        };
        let p0 = start_point(&m, 3, None);
        let first = simulate_orbit(&m, p0, 2_000_000, 100_000, 40, &[&o]).unwrap();
        let second = simulate_orbit(&m, first.last, 2_000_000, 0, 40, &[&o]).unwrap();
        let se = first.std_error(0).hypot(second.std_error(0));
        assert!(
            (first.mean(0) - second.mean(0)).abs() <= 3.0 * se,
            "{} vs {} (se {se})",
            first.mean(0),
            second.mean(0)
        );
        let again = simulate_orbit(&m, p0, 2_000_000, 100_000, 40, &[&o]).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn constant_observable_has_zero_correlation() {
        let m = model();
        let cfg = ChainConfig {
            chains: 4,
            length: 20_000,
            burn_in: 1000,
            batches_per_chain: 4,
            seed: 1,
        };
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let s = correlation_mc(&m, &phi, &Constant(0.7), &[0, 1, 5, 20], &cfg, None).unwrap();
        assert!(s.c_values.iter().all(|&c| c == 0.0));
        let s = correlation_mc(&m, &Constant(-2.0), &phi, &[0, 3], &cfg, None).unwrap();
        assert!(s.c_values.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn lag_zero_matches_two_pass_covariance() {
        let m = model();
        let cfg = ChainConfig {
            chains: 1,
            length: 50_000,
            burn_in: 500,
            batches_per_chain: 2,
            seed: 4,
        };
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let psi = UnstableCoordinate;
        let s = correlation_mc(&m, &phi, &psi, &[0], &cfg, None).unwrap();
        let mut rng = stream(4, 0);
        let p0 = random_base_point(&m, &mut rng);
        let a = orbit_values(&m, p0, 50_000, 500, &phi).unwrap();
        let b = orbit_values(&m, p0, 50_000, 500, &psi).unwrap();
        let (ma, mb) = (a.iter().sum::<f64>() / 5e4, b.iter().sum::<f64>() / 5e4);
        let cov = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / 5e4;
        assert!(
            (s.c_values[0] - cov.abs()).abs() < 1e-12,
            "{} vs {cov}",
            s.c_values[0]
        );
    }

    #[test]
    fn tight_tolerance_reports_insufficient_samples() {
        let m = model();
        let cfg = ChainConfig {
            chains: 2,
            length: 4000,
            burn_in: 100,
            batches_per_chain: 4,
            seed: 1,
        };
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let r = correlation_mc(&m, &phi, &phi, &[1], &cfg, Some(1e-9));
        assert!(matches!(r, Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn mc_is_independent_of_worker_count() {
        let m = model();
        let cfg = ChainConfig {
            chains: 6,
            length: 10_000,
            burn_in: 100,
            batches_per_chain: 2,
            seed: 8,
        };
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| correlation_mc(&m, &phi, &phi, &[0, 2, 7], &cfg, None).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn spectral_constant_is_zero_and_shapes_checked() {
        let m = model();
        let table = LevelTable::new(&m, 200_000).unwrap();
        let grid = UlamGrid {
            bins: 64,
            max_level: 400,
            points_per_bin: 2000,
            ..UlamGrid::default()
        };
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let d = ulam_discretize(
            &m,
            &table,
            &grid,
            &crate::tower::ulam::TestPoints,
            &[&phi, &Constant(1.25)],
        )
        .unwrap();
        let inv = invariant_density(&d.matrix).unwrap();
        let s = correlation_spectral(
            &d.matrix,
            &inv.rho,
            &d.observables[0],
            &d.observables[1],
            &[0, 1, 10],
        )
        .unwrap();
        assert!(s.c_values.iter().all(|&c| c <= 1e-14), "{:?}", s.c_values);
        let r = correlation_spectral(
            &d.matrix,
            &inv.rho,
            &d.observables[0][1..],
            &d.observables[1],
            &[1],
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ld_trivial_cases() {
        let m = model();
        let cfg = LdConfig {
            ensemble: 2000,
            members_per_chain: 250,
            burn_in: 100,
            stride: 0,
            seed: 2,
        };
        let out = large_deviation(&m, &Constant(0.3), &[1e-9, 0.1], &[1, 10, 50], &cfg).unwrap();
        assert!(out.iter().all(|s| s.ld.iter().all(|&v| v == 0.0)));
        let phi = Trig {
            freq: 1.0,
            sine: false,
        };
        let out = large_deviation(
            &m,
            &phi,
            &[2.0 * phi.sup_norm() + 1e-9, 0.05],
            &[1, 10, 50],
            &cfg,
        )
        .unwrap();
        assert!(out[0].ld.iter().all(|&v| v == 0.0));
        assert!(out[1].ld[0] > out[1].ld[2]);
        assert_eq!(out[1].ensemble, 2000);
        let bad = LdConfig { stride: 10, ..cfg };
        assert!(large_deviation(&m, &phi, &[0.1], &[50], &bad).is_err());
    }

    #[test]
    fn wilson_interval_brackets() {
        let (lo, hi) = wilson(50, 1000);
        assert!(lo < 0.05 && hi > 0.05);
        assert_eq!(wilson(0, 100).0, 0.0);
    }

    #[test]
    fn holder_seminorm_trivial_cases() {
        let m = model();
        let pairs = sample_pairs(&m, 5000, (1e-6, 1e-1), 5);
        assert_eq!(holder_seminorm(&m, &Constant(4.0), 1.0, &pairs), 0.0);
        let s = holder_seminorm(&m, &UnstableCoordinate, 1.0, &pairs);
        assert!(s <= 1.0 + 1e-9 && s > 0.99, "{s}");
        let trig = Trig {
            freq: 1.0,
            sine: false,
        };
        let a = holder_seminorm(&m, &trig, 1.0, &pairs);
        let b = holder_seminorm(&m, &trig, 1.0, &sample_pairs(&m, 5000, (1e-6, 1e-1), 6));
        assert!((a / b - 1.0).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn neumaier_recovers_cancelled_mass() {
        let mut s = Neumaier::default();
        for x in [1.0, 1e100, 1.0, -1e100] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}
