//! Acceptance suite. Runs every criterion at its stated scale and tolerance
//! and prints one PASS/FAIL line each.
//!
//! Two criteria are red on this model and are listed in `KNOWN_RED` with
//! the reason; they still print FAIL. The process fails when any other
//! criterion fails.

use std::time::{Duration, Instant};

use rand::Rng;
use towerlab::cohomology::{
    deep_entry_points, verify_gtheta, Cohomology, GthetaPair, TailConstants,
};
use towerlab::coupling::{
    base_distribution, coupling_bound, direct_tv, run_cells, sample_coupling_times, select_i0,
    BaseDensity, CellConfig, CouplingConfig, TimesConfig,
};
use towerlab::fit::fit_slope;
use towerlab::intermittent::{boundary_sequence, IntermittentParams, Side};
use towerlab::model::{HyperbolicModel, ModelConfig, Point2};
use towerlab::observables::{Constant, Mixed, Trig, UnstableCoordinate};
use towerlab::returns::{
    log_grid, sample_returns, tail_histogram, LevelTable, BASE_CELL, DEFAULT_CAP,
};
use towerlab::rng::stream;
use towerlab::stats::{
    correlation_mc, correlation_spectral, disagreements, large_deviation, ChainConfig,
    CorrelationContext, CorrelationEstimator, LdConfig, MonteCarloEstimator, SpectralEstimator,
};
use towerlab::tower::ulam::TestPoints;
use towerlab::tower::{
    invariant_density, jacobian_regularity, ulam_discretize, NeutralPartition, Tower, TowerPoint,
    UlamGrid, UlamScheme,
};
use towerlab::validate::{survey_envelopes, EnvelopeConfig};

/// Criteria that fail on this model, with the reason printed beside FAIL.
const KNOWN_RED: &[(u32, &str)] = &[
    (1, "the level sets of the neutral branch have measure of order n^-(1/theta), so the return tail decays one power slower than targeted"),
    (8, "inherits the slower return tail: deviations decay like n * P(R > n), about n^-1 here"),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Setup {
    model: HyperbolicModel,
    table: LevelTable,
}

impl Setup {
    fn new() -> Self {
        let model = HyperbolicModel::build(&ModelConfig::default()).unwrap();
        let table = LevelTable::new(&model, 1_000_000).unwrap();
        Setup { model, table }
    }

    fn tower(&self) -> Tower<'_> {
        Tower::new(&self.model, &self.table, DEFAULT_CAP)
    }

    fn correlation_grid(&self) -> UlamGrid {
        UlamGrid {
            bins: 1024,
            max_level: 4000,
            exit_bins: 256,
            neutral_bins: 8,
            ..UlamGrid::default()
        }
    }
}

fn return_tail(s: &Setup) -> Outcome {
    let start = Instant::now();
    let hist = sample_returns(&s.model, &s.table, 10_000_000, 11, DEFAULT_CAP).unwrap();
    let est = tail_histogram(&hist, (20, 500), 12).unwrap();
    let elapsed = start.elapsed();
    let pass = (-3.35..=-2.65).contains(&est.slope) && elapsed <= Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "slope {:.3} (ci {:.3}..{:.3}) over [20,500], target [-3.35,-2.65], {} censored, {:.0?}",
            est.slope, est.slope_ci.0, est.slope_ci.1, est.censored, elapsed
        ),
    )
}

fn boundary_asymptotics(_: &Setup) -> Outcome {
    const N: usize = 1_000_000;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for theta in [0.5, 1.0] {
        let p = IntermittentParams::new(theta, 0.5, -0.5).unwrap();
        for side in [Side::Right, Side::Left] {
            let seq = boundary_sequence(&p, side, N).unwrap();
            let scaled = seq.values[N].abs() * (theta * N as f64).powf(1.0 / theta);
            worst = worst.max((scaled - 1.0).abs());
            parts.push(format!("θ={theta} {side:?} {scaled:.5}"));
        }
    }
    outcome(
        worst <= 0.02,
        format!(
            "a_n(θn)^(1/θ) at n=1e6: {}; worst deviation {worst:.4}",
            parts.join(", ")
        ),
    )
}

fn correlation_decay(s: &Setup) -> Outcome {
    let start = Instant::now();
    let (phi, psi) = (
        Trig {
            freq: 1.0,
            sine: false,
        },
        UnstableCoordinate,
    );
    let grid = s.correlation_grid();
    let d = ulam_discretize(&s.model, &s.table, &grid, &NeutralPartition, &[&phi, &psi]).unwrap();
    let states = d.matrix.len();
    let inv = invariant_density(&d.matrix).unwrap();
    let ns = log_grid(10, 200, 40);
    let series = correlation_spectral(
        &d.matrix,
        &inv.rho,
        &d.observables[0],
        &d.observables[1],
        &ns,
    )
    .unwrap();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let fit = fit_slope(&xs, &series.c_values, (10.0, 200.0), 13).unwrap();

    let ctx = CorrelationContext {
        model: &s.model,
        table: &s.table,
        chains: ChainConfig {
            chains: 32,
            length: 3_000_000,
            burn_in: 100_000,
            batches_per_chain: 8,
            seed: 14,
        },
        grid,
        scheme: NeutralPartition.name().into(),
    };
    let sampled = [10, 14, 20, 28, 40, 56, 80, 112, 160, 200];
    let sp = SpectralEstimator
        .estimate(&ctx, &phi, &psi, &sampled)
        .unwrap();
    let mc = MonteCarloEstimator
        .estimate(&ctx, &phi, &psi, &sampled)
        .unwrap();
    let disagree: Vec<u64> = disagreements(&sp, &mc)
        .into_iter()
        .map(|k| sampled[k])
        .collect();
    let elapsed = start.elapsed();
    let pass = states >= 20_000
        && fit.slope <= -1.6
        && disagree.is_empty()
        && elapsed <= Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "{states} states, spectral slope {:.3} (ci {:.3}..{:.3}) vs bound -1.6, MC disagrees at {:?}, {:.0?}",
            fit.slope, fit.ci.0, fit.ci.1, disagree, elapsed
        ),
    )
}

fn structural_exactness(s: &Setup) -> Outcome {
    // interval propagation needs affine branches, so it has no say here
    let schemes: [(&dyn UlamScheme, UlamGrid); 2] = [
        (&NeutralPartition, s.correlation_grid()),
        (
            &TestPoints,
            UlamGrid {
                bins: 64,
                max_level: 2000,
                points_per_bin: 20_000,
                ..UlamGrid::default()
            },
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (scheme, grid) in schemes {
        let d = ulam_discretize(&s.model, &s.table, &grid, scheme, &[]).unwrap();
        let inv = invariant_density(&d.matrix).unwrap();
        let defect = d.matrix.max_row_defect();
        pass &= defect <= 1e-10 && inv.residual <= 1e-10 && inv.floor > 0.0;
        parts.push(format!(
            "{}: rows {defect:.1e}, residual {:.1e}, floor {:.1e}",
            scheme.name(),
            inv.residual,
            inv.floor
        ));
    }
    outcome(pass, parts.join("; "))
}

fn validators(s: &Setup) -> Outcome {
    let survey = survey_envelopes(
        s.tower(),
        &EnvelopeConfig {
            seed: 15,
            ..EnvelopeConfig::default()
        },
    )
    .unwrap();
    let mut pass = survey.distortion_beta < 1.0;
    let mut parts = vec![format!("fitted β {:.3}", survey.distortion_beta)];
    for e in &survey.envelopes {
        pass &= e.bounded(10.0);
        parts.push(format!("{} max/median {:.2}", e.name, e.spread()));
    }
    outcome(pass, parts.join(", "))
}

fn coupling(s: &Setup) -> Outcome {
    let start = Instant::now();
    let tower = s.tower();
    let m = &s.model;
    let base = m.cells[BASE_CELL];
    let mut rng = stream(16, 0);
    let width = base.u.1 - base.u.0;
    let pairs: Vec<(f64, f64)> = (0..20_000)
        .map(|_| {
            let a = base.u.0 + width * (0.01 + 0.98 * rng.gen::<f64>());
            (a, a + width * 10f64.powf(-8.0 + 6.0 * rng.gen::<f64>()))
        })
        .collect();
    let jf = jacobian_regularity(m, &s.table, &pairs, 1, DEFAULT_CAP).unwrap();
    let zeta = m.params().tau + 1.0;
    let cfg = CouplingConfig::derive(jf.c_f, jf.beta, zeta, 1.05, 1).unwrap();
    let dens = [
        BaseDensity::new(0.0).unwrap(),
        BaseDensity::new(0.5).unwrap(),
    ];
    let cells = CellConfig {
        samples: 64,
        stages: 8,
        points: 16,
        max_time: 50_000,
        seed: 17,
    };
    let cfg = select_i0(tower, &cfg, dens, &cells, 50).unwrap();
    let run = run_cells(tower, &cfg, dens, &cells).unwrap();
    let residual = run.worst_marginal_residual();

    let big = TimesConfig {
        pairs: 1_000_000,
        horizon: 0,
        cap: DEFAULT_CAP,
        increments: 1,
        seed: 18,
    };
    let t = sample_coupling_times(tower, dens, cfg.lag, &big).unwrap();
    let tail = tail_histogram(t.first(), (20, 500), 19).unwrap();
    let target = -(zeta - 1.0);

    let occupancy = TimesConfig {
        pairs: 100_000,
        horizon: 1000,
        cap: DEFAULT_CAP,
        increments: 11,
        seed: 20,
    };
    let times = sample_coupling_times(tower, dens, cfg.lag, &occupancy).unwrap();
    let grid = UlamGrid {
        bins: 64,
        max_level: 2000,
        points_per_bin: 20_000,
        ..UlamGrid::default()
    };
    let d = ulam_discretize(m, &s.table, &grid, &TestPoints, &[]).unwrap();
    let (a, b) = (
        base_distribution(&d.matrix, dens[0]).unwrap(),
        base_distribution(&d.matrix, dens[1]).unwrap(),
    );
    let ns = log_grid(1, 1000, 20);
    let tv = direct_tv(&d.matrix, &a, &b, &ns).unwrap();
    let pc = coupling_bound(&cfg, &times, &ns, &tv, 0.0).unwrap();
    let elapsed = start.elapsed();

    let pass = run.all_decrease()
        && residual <= 1e-10
        && (tail.slope - target).abs() <= 0.4
        && pc.holds
        && elapsed <= Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "K {:.3}, ρ {}, i0 {}; decrease {} over {} stages, marginal residual {residual:.1e}; \
             T slope {:.3} vs {target}; TV <= bound at {} n: {}; {:.0?}",
            cfg.k,
            cfg.rho,
            cfg.i0,
            run.all_decrease(),
            run.stages.len(),
            tail.slope,
            ns.len(),
            pc.holds,
            elapsed
        ),
    )
}

fn cohomology(s: &Setup) -> Outcome {
    let m = &s.model;
    let tower = s.tower();
    let phi = Mixed;
    let co = Cohomology::new(
        tower,
        &phi,
        TailConstants {
            holder: 1.0,
            contraction: 1.0,
        },
    );
    let eta = 1.0;
    let base = m.cells[BASE_CELL];

    // deep entries to the neutral region plus random tower points
    let depths: Vec<usize> = (5..=17).map(|k| 1usize << k).collect();
    let mut points: Vec<TowerPoint> = deep_entry_points(m, &s.table, &depths, 0.95)
        .unwrap()
        .into_iter()
        .map(|x| tower.point(x, 0).unwrap())
        .collect();
    let mut rng = stream(21, 0);
    for _ in 0..500 {
        let x = Point2::new(
            BASE_CELL,
            rng.gen_range(base.u.0..base.u.1),
            rng.gen_range(base.s.0..base.s.1),
        );
        let l = rng.gen_range(0..tower.point(x, 0).unwrap().ret.r);
        points.push(tower.point(x, l).unwrap());
    }
    let mut identity: f64 = 0.0;
    for p in &points {
        identity = identity.max(co.psi(p, 1024).unwrap().identity_residual);
    }
    let ns: Vec<u64> = (5..=13).map(|k| 1u64 << k).collect();
    let mut gaps = vec![0.0f64; ns.len() - 1];
    for p in &points {
        let c = co.chi_partial(p, &ns).unwrap();
        for i in 0..gaps.len() {
            gaps[i] = gaps[i].max((c[i] - c[i + 1]).abs());
        }
    }
    let xs: Vec<f64> = ns[..gaps.len()].iter().map(|&n| n as f64).collect();
    let rate = fit_slope(&xs, &gaps, (32.0, 4096.0), 22).unwrap();
    let expected = 1.0 - co.alpha() * eta;

    let mut d = Vec::new();
    for seed in [23, 24] {
        let mut rng = stream(seed, 0);
        let mut pairs = Vec::new();
        while pairs.len() < 2000 {
            let x = Point2::new(
                BASE_CELL,
                rng.gen_range(base.u.0..base.u.1),
                rng.gen_range(base.s.0..base.s.1),
            );
            let y = Point2::new(
                BASE_CELL,
                x.a + (1e-10f64.ln() + rng.gen::<f64>() * 1e9f64.ln()).exp(),
                x.b,
            );
            if !base.contains(y.a, y.b) {
                continue;
            }
            let (tx, ty) = (tower.point(x, 0).unwrap(), tower.point(y, 0).unwrap());
            let l = rng.gen_range(0..tx.ret.r.min(ty.ret.r));
            let (p, q) = (tower.point(x, l).unwrap(), tower.point(y, l).unwrap());
            let sep = tower.separation(&p, &q, 64).unwrap();
            let delta = (co.psi(&p, 1024).unwrap().value - co.psi(&q, 1024).unwrap().value).abs();
            pairs.push(GthetaPair { delta, s: sep });
        }
        d.push(verify_gtheta(&pairs, co.theta_prime()).d_psi);
    }
    let stable = d.iter().all(|v| v.is_finite()) && (d[0] - d[1]).abs() <= 0.1 * d[0].max(d[1]);
    let pass = identity <= 1e-12 && (rate.slope - expected).abs() <= 0.3 && stable;
    outcome(
        pass,
        format!(
            "identity residual {identity:.1e}; Cauchy rate {:.3} vs {expected}; D_psi {:.4} and {:.4}",
            rate.slope, d[0], d[1]
        ),
    )
}

fn large_deviations(s: &Setup) -> Outcome {
    let phi = Trig {
        freq: 1.0,
        sine: false,
    };
    let ns = vec![
        10, 13, 17, 22, 28, 37, 48, 62, 80, 103, 134, 173, 224, 289, 374, 500,
    ];
    let cfg = LdConfig {
        ensemble: 1_000_000,
        members_per_chain: 1000,
        burn_in: 100_000,
        stride: 0,
        seed: 25,
    };
    let all = large_deviation(&s.model, &phi, &[0.1, 0.2, 0.3], &ns, &cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for series in &all {
        let (xs, ys): (Vec<f64>, Vec<f64>) = series
            .n_values
            .iter()
            .zip(&series.ld)
            .filter(|(_, &v)| v >= 1e-4)
            .map(|(&n, &v)| (n as f64, v))
            .unzip();
        match fit_slope(&xs, &ys, (xs[0], *xs.last().unwrap()), 26) {
            Ok(fit) => {
                pass &= fit.slope <= -1.5;
                parts.push(format!(
                    "ε={} slope {:.3} over {} n",
                    series.eps,
                    fit.slope,
                    xs.len()
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("ε={} {e}", series.eps));
            }
        }
    }
    outcome(pass, format!("{} vs bound -1.5", parts.join(", ")))
}

fn trivial_exactness(s: &Setup) -> Outcome {
    let c = Constant(2.5);
    let ns = [1, 10, 100];
    let chains = ChainConfig {
        chains: 2,
        length: 20_000,
        burn_in: 100,
        batches_per_chain: 4,
        seed: 27,
    };
    let mc = correlation_mc(&s.model, &c, &c, &ns, &chains, None).unwrap();
    let grid = UlamGrid {
        bins: 64,
        max_level: 400,
        exit_bins: 32,
        neutral_bins: 4,
        ..UlamGrid::default()
    };
    let d = ulam_discretize(&s.model, &s.table, &grid, &NeutralPartition, &[&c]).unwrap();
    let inv = invariant_density(&d.matrix).unwrap();
    let sp = correlation_spectral(
        &d.matrix,
        &inv.rho,
        &d.observables[0],
        &d.observables[0],
        &ns,
    )
    .unwrap();
    let ld = large_deviation(
        &s.model,
        &c,
        &[1e-3],
        &[10, 100],
        &LdConfig {
            ensemble: 10_000,
            members_per_chain: 100,
            burn_in: 100,
            stride: 0,
            seed: 28,
        },
    )
    .unwrap();
    let worst = mc
        .c_values
        .iter()
        .chain(&sp.c_values)
        .chain(&ld[0].ld)
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    outcome(
        worst <= 1e-14,
        format!("largest |C_n| or LD for a constant observable: {worst:e}"),
    )
}

fn main() {
    let setup = Setup::new();
    let criteria: [(u32, &str, fn(&Setup) -> Outcome); 9] = [
        (1, "return-tail exponent", return_tail),
        (2, "boundary-sequence asymptotics", boundary_asymptotics),
        (3, "correlation decay", correlation_decay),
        (4, "structural exactness", structural_exactness),
        (5, "leaf-pair validators", validators),
        (6, "coupling", coupling),
        (7, "cohomology", cohomology),
        (8, "large deviations", large_deviations),
        (9, "trivial exactness", trivial_exactness),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let o = run(&setup);
        let known = KNOWN_RED
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, why)| *why);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {verdict}: {}", o.detail);
        match (o.pass, known) {
            (false, Some(why)) => println!("    known red: {why}"),
            (false, None) => unexpected.push(id),
            (true, Some(_)) => println!("    listed as known red but passed"),
            (true, None) => {}
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
