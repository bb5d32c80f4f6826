//! Sampled envelopes of the contraction, distortion and cylinder-diameter
//! bounds of the tower construction.
//!
//! Contraction and diameter families report one scaled value per sampled
//! pair; distortion reports one per separation time. A family is considered
//! bounded when its largest value stays within a fixed factor of its median,
//! which catches growth in the sampled range without needing the unknown
//! constant.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{check_contraction, Direction, HyperbolicModel, Point2};
use crate::returns::{distortion_check, fit_geometric, LevelTable, BASE_CELL};
use crate::rng::{par_chunks, subseed};
use crate::tower::{diameter_envelope, Tower};

const CHUNK: usize = 256;
/// Pairs needed at one separation time before its maximum is used.
const MIN_GROUP: usize = 20;

#[derive(Debug, Clone)]
pub struct EnvelopeConfig {
    pub pairs: usize,
    /// Iterates followed by each contraction pair.
    pub steps: usize,
    /// Largest `k` of the diameter envelope.
    pub kmax: u64,
    /// Separation times are counted up to this many returns.
    pub max_returns: u64,
    /// Initial offsets are drawn log-uniformly from this range.
    pub offsets: (f64, f64),
    pub seed: u64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            pairs: 10_000,
            steps: 200,
            kmax: 500,
            max_returns: 64,
            offsets: (1e-10, 1e-2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub name: &'static str,
    pub values: Vec<f64>,
    /// Pairs dropped: boundary ties, offsets leaving the cell, and for
    /// distortion pairs split by the return, with an affine return, or at a
    /// separation time too rarely sampled.
    pub dropped: usize,
}

impl Envelope {
    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest value over the median.
    pub fn spread(&self) -> f64 {
        self.max() / self.median()
    }

    pub fn bounded(&self, factor: f64) -> bool {
        let (m, med) = (self.max(), self.median());
        m.is_finite() && med > 0.0 && m <= factor * med
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeSurvey {
    pub envelopes: Vec<Envelope>,
    /// Geometric rate fitted to the distortion samples.
    pub distortion_beta: f64,
}

impl EnvelopeSurvey {
    pub fn get(&self, name: &str) -> Option<&Envelope> {
        self.envelopes.iter().find(|e| e.name == name)
    }
}

fn offset(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    (range.0.ln() + rng.gen::<f64>() * (range.1 / range.0).ln()).exp()
}

/// Collects `job` over `pairs` chunked draws, counting dropped draws.
fn collect<T: Send>(
    seed: u64,
    pairs: usize,
    job: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Result<Option<T>> + Sync,
) -> Result<(Vec<T>, usize)> {
    let parts = par_chunks(
        seed,
        pairs,
        CHUNK,
        |rng, _, len| -> Result<(Vec<T>, usize)> {
            let mut out = Vec::with_capacity(len);
            let mut ties = 0;
            for _ in 0..len {
                match job(rng) {
                    Ok(Some(v)) => out.push(v),
                    Ok(None) | Err(Error::BoundaryTie { .. }) => ties += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((out, ties))
        },
    );
    let mut values = Vec::with_capacity(pairs);
    let mut ties = 0;
    for p in parts {
        let (v, t) = p?;
        values.extend(v);
        ties += t;
    }
    Ok((values, ties))
}

fn contraction(
    m: &HyperbolicModel,
    cfg: &EnvelopeConfig,
    dir: Direction,
    name: &'static str,
) -> Result<Envelope> {
    let (values, ties) = collect(subseed(cfg.seed, name), cfg.pairs, |rng| {
        // leaves of the reference set only
        let (cell, r) = (BASE_CELL, m.cells[BASE_CELL]);
        let x = Point2::new(
            cell,
            rng.gen_range(r.u.0..r.u.1),
            rng.gen_range(r.s.0..r.s.1),
        );
        let d = offset(rng, cfg.offsets);
        let y = match dir {
            Direction::Forward => Point2::new(cell, x.a, x.b + d),
            Direction::Backward => Point2::new(cell, x.a + d, x.b),
        };
        if !r.contains(y.a, y.b) {
            return Ok(None);
        }
        Ok(Some(check_contraction(x, y, cfg.steps, dir, m)?.sup()))
    })?;
    Ok(Envelope {
        name,
        values,
        dropped: ties,
    })
}

/// Samples every envelope family.
pub fn survey_envelopes(tower: Tower<'_>, cfg: &EnvelopeConfig) -> Result<EnvelopeSurvey> {
    if cfg.pairs == 0 {
        return Err(Error::InsufficientSamples("no pairs requested".into()));
    }
    let m = tower.model;
    let table: &LevelTable = tower.table;
    let base = m.cells[BASE_CELL];

    let forward = contraction(m, cfg, Direction::Forward, "stable_contraction")?;
    let backward = contraction(m, cfg, Direction::Backward, "unstable_contraction")?;

    let (samples, dist_ties) = collect(subseed(cfg.seed, "distortion"), cfg.pairs, |rng| {
        let x = Point2::new(
            BASE_CELL,
            rng.gen_range(base.u.0..base.u.1),
            rng.gen_range(base.s.0..base.s.1),
        );
        let y = Point2::new(BASE_CELL, x.a + offset(rng, cfg.offsets), x.b);
        if !base.contains(y.a, y.b) {
            return Ok(None);
        }
        let d = distortion_check(x, y, m, table, cfg.max_returns, tower.cap)?;
        // distortion is only claimed inside one return cylinder, and affine
        // returns have none at all
        Ok((d.same_cylinder && d.log_ratio > 0.0).then_some((d.log_ratio, d.separation.s)))
    })?;
    // The bound is an envelope in the separation time: pairs at one `s`
    // spread over the whole cylinder, so only the largest of them is tight.
    let mut by_s: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &(v, s) in &samples {
        let e = by_s.entry(s).or_insert((0.0, 0));
        e.0 = e.0.max(v);
        e.1 += 1;
    }
    let upper: Vec<(f64, u64)> = by_s
        .iter()
        .filter(|(_, e)| e.1 >= MIN_GROUP)
        .map(|(&s, e)| (e.0, s))
        .collect();
    let (_, beta) = fit_geometric(&upper).ok_or_else(|| {
        Error::DegenerateSupport("distortion samples do not span two separation times".into())
    })?;
    let distortion = Envelope {
        name: "distortion",
        values: upper
            .iter()
            .map(|&(v, s)| v / beta.powf(s as f64))
            .collect(),
        dropped: dist_ties + samples.len() - upper.iter().map(|(_, s)| by_s[s].1).sum::<usize>(),
    };

    let (values, ties) = collect(subseed(cfg.seed, "diameter"), cfg.pairs, |rng| {
        let x = Point2::new(
            BASE_CELL,
            rng.gen_range(base.u.0..base.u.1),
            rng.gen_range(base.s.0..base.s.1),
        );
        let t = tower.point(x, 0)?;
        let t = tower.point(x, rng.gen_range(0..t.ret.r))?;
        Ok(Some(diameter_envelope(&tower, &t, cfg.kmax)?))
    })?;
    let diameter = Envelope {
        name: "diameter",
        values,
        dropped: ties,
    };

    Ok(EnvelopeSurvey {
        envelopes: vec![forward, backward, distortion, diameter],
        distortion_beta: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::returns::DEFAULT_CAP;

    #[test]
    fn median_and_spread() {
        let e = Envelope {
            name: "x",
            values: vec![1.0, 4.0, 2.0, 3.0],
            dropped: 0,
        };
        assert_eq!(e.median(), 2.5);
        assert_eq!(e.max(), 4.0);
        assert!(e.bounded(2.0));
        assert!(!e.bounded(1.5));
        let z = Envelope {
            name: "z",
            values: vec![0.0, 0.0, 1.0],
            dropped: 0,
        };
        assert!(!z.bounded(10.0));
    }

    #[test]
    fn small_survey_is_deterministic() {
        let m = HyperbolicModel::build(&ModelConfig::default()).unwrap();
        let t = LevelTable::new(&m, 100_000).unwrap();
        let tower = Tower::new(&m, &t, DEFAULT_CAP);
        let cfg = EnvelopeConfig {
            pairs: 6000,
            steps: 30,
            kmax: 30,
            ..Default::default()
        };
        let a = survey_envelopes(tower, &cfg).unwrap();
        let b = survey_envelopes(tower, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.envelopes.len(), 4);
        assert!(a.distortion_beta > 0.0 && a.distortion_beta < 1.0);
        for e in &a.envelopes {
            assert!(
                e.values.iter().all(|v| v.is_finite() && *v >= 0.0),
                "{}",
                e.name
            );
        }
    }

    #[test]
    fn zero_pairs_rejected() {
        let m = HyperbolicModel::build(&ModelConfig::default()).unwrap();
        let t = LevelTable::new(&m, 1000).unwrap();
        let cfg = EnvelopeConfig {
            pairs: 0,
            ..Default::default()
        };
        assert!(matches!(
            survey_envelopes(Tower::new(&m, &t, DEFAULT_CAP), &cfg),
            Err(Error::InsufficientSamples(_))
        ));
    }
}
