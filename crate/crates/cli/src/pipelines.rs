//! Experiment pipelines, looked up by subcommand name.

use rand::Rng;
use towerlab::coupling::{
    base_distribution, coupling_bound, direct_tv, first_admissible_index,
    increment_domination_check, run_cells, sample_coupling_times, select_i0, BaseDensity,
    CellConfig, CouplingConfig, TimesConfig, MIN_INCREMENT_SAMPLES,
};
use towerlab::fit::fit_slope;
use towerlab::model::HyperbolicModel;
use towerlab::observables::ObservableRegistry;
use towerlab::returns::{log_grid, sample_returns, tail_histogram, LevelTable, BASE_CELL};
use towerlab::rng::{stream, subseed};
use towerlab::stats::{
    disagreements, large_deviation, ChainConfig, CorrelationContext, EstimatorRegistry, LdConfig,
};
use towerlab::tower::density::second_eigenvalue;
use towerlab::tower::ulam::TestPoints;
use towerlab::tower::{
    invariant_density, jacobian_regularity, ulam_discretize, Tower, TowerState, UlamGrid,
    UlamRegistry,
};
use towerlab::validate::{survey_envelopes, EnvelopeConfig};
use towerlab::Error;

use crate::config::{Config, GridSection};
use crate::error::CliError;
use crate::output::{num, slope_status, Report, Status, Table};

pub struct Context<'a> {
    pub cfg: &'a Config,
    pub model: &'a HyperbolicModel,
    pub table: &'a LevelTable,
}

impl Context<'_> {
    fn tower(&self) -> Tower<'_> {
        Tower::new(self.model, self.table, self.cfg.model.cap)
    }

    fn seed(&self, tag: &str) -> u64 {
        subseed(self.cfg.seed, tag)
    }

    fn grid(&self, g: &GridSection, tag: &str) -> UlamGrid {
        UlamGrid {
            bins: g.bins,
            max_level: g.max_level,
            points_per_bin: g.points_per_bin,
            seed: self.seed(tag),
            cap: self.cfg.model.cap,
            exit_bins: g.exit_bins,
            neutral_bins: g.neutral_bins,
        }
    }
}

pub trait Pipeline: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError>;
}

pub struct Registry {
    entries: Vec<Box<dyn Pipeline>>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry {
            entries: vec![
                Box::new(Validate),
                Box::new(Tails),
                Box::new(Correlations),
                Box::new(LargeDeviations),
                Box::new(Spectra),
                Box::new(Couple),
            ],
        }
    }
}

impl Registry {
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|p| p.name()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&dyn Pipeline> {
        self.entries
            .iter()
            .find(|p| p.name() == name)
            .map(|p| p.as_ref())
    }

    /// Runs one pipeline, or every pipeline in order for `all`.
    pub fn run(&self, name: &str, ctx: &Context<'_>) -> Result<Report, CliError> {
        if name == "all" {
            let mut out = Report::default();
            for p in &self.entries {
                out.merge(p.run(ctx)?);
            }
            return Ok(out);
        }
        let p = self
            .get(name)
            .ok_or_else(|| CliError::Config(format!("unknown subcommand '{name}'")))?;
        p.run(ctx)
    }
}

fn half_width(ci: (f64, f64)) -> f64 {
    0.5 * (ci.1 - ci.0)
}

struct Tails;

impl Pipeline for Tails {
    fn name(&self) -> &'static str {
        "tails"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.tails;
        if c.samples == 0 {
            return Err(
                Error::InsufficientSamples("tails needs at least one sample".into()).into(),
            );
        }
        let hist = sample_returns(
            ctx.model,
            ctx.table,
            c.samples,
            ctx.seed("tails"),
            ctx.cfg.model.cap,
        )?;
        let est = tail_histogram(&hist, c.window, ctx.seed("tails-bootstrap"))?;
        let mut r = Report::default();
        let mut t = Table::new("tails.csv", &["n", "survival", "count"]);
        let total = est.sample_size as f64;
        for &(n, count) in &est.survival {
            t.push(vec![
                n.to_string(),
                num(count as f64 / total),
                count.to_string(),
            ]);
        }
        r.tables.push(t);
        let hw = half_width(est.slope_ci);
        r.slope("return_tail", est.slope, hw);
        r.note("tail_window", format!("[{}, {}]", c.window.0, c.window.1));
        r.note(
            "tail_ci",
            format!("[{:.4}, {:.4}]", est.slope_ci.0, est.slope_ci.1),
        );
        r.note("censored_count", est.censored);
        r.note("boundary_ties", hist.ties);
        r.note("return_gcd", hist.gcd());
        let target = c.target.unwrap_or(-ctx.cfg.zeta_target());
        r.check(
            "return_tail_slope",
            slope_status(est.slope, hw, target, c.tolerance, c.max_ci, false),
        );
        Ok(r)
    }
}

struct Validate;

impl Pipeline for Validate {
    fn name(&self) -> &'static str {
        "validate"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.validate;
        let ec = EnvelopeConfig {
            pairs: c.pairs,
            steps: c.steps,
            kmax: c.kmax,
            seed: ctx.seed("validate"),
            ..Default::default()
        };
        let survey = survey_envelopes(ctx.tower(), &ec)?;
        let mut r = Report::default();
        let mut t = Table::new(
            "validate.csv",
            &["family", "samples", "dropped", "median", "max", "spread"],
        );
        for e in &survey.envelopes {
            t.push(vec![
                e.name.into(),
                e.values.len().to_string(),
                e.dropped.to_string(),
                num(e.median()),
                num(e.max()),
                num(e.spread()),
            ]);
            r.check(
                &format!("envelope_{}", e.name),
                Status::from_bool(e.bounded(c.factor)),
            );
        }
        r.tables.push(t);
        r.note("distortion_beta", format!("{:.6}", survey.distortion_beta));
        r.check(
            "distortion_beta_below_one",
            Status::from_bool(survey.distortion_beta < 1.0),
        );
        Ok(r)
    }
}

struct Correlations;

impl Pipeline for Correlations {
    fn name(&self) -> &'static str {
        "correlations"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.correlations;
        let obs = ObservableRegistry::default();
        let (phi, psi) = (obs.build(&c.phi)?, obs.build(&c.psi)?);
        let cx = CorrelationContext {
            model: ctx.model,
            table: ctx.table,
            chains: ChainConfig {
                chains: c.chains,
                length: c.length,
                burn_in: c.burn_in,
                batches_per_chain: c.batches_per_chain,
                seed: ctx.seed("chains"),
            },
            grid: ctx.grid(&c.grid, "correlation-grid"),
            scheme: c.grid.scheme.clone(),
        };
        let estimators = EstimatorRegistry::default();
        let main = estimators.get(&c.estimator)?;
        let ns = log_grid(c.window.0, c.window.1, c.fit_points);
        let series = main.estimate(&cx, phi.as_ref(), psi.as_ref(), &ns)?;

        let mut r = Report::default();
        let mut t = Table::new("correlations.csv", &["n", "C_n", "ci"]);
        for (k, &n) in series.n_values.iter().enumerate() {
            let ci = series.ci.as_ref().map(|v| num(v[k])).unwrap_or_default();
            t.push(vec![n.to_string(), num(series.c_values[k]), ci]);
        }
        r.tables.push(t);
        let xs: Vec<f64> = series.n_values.iter().map(|&n| n as f64).collect();
        let window = (c.window.0 as f64, c.window.1 as f64);
        let target = c.target.unwrap_or(-1.0 / ctx.cfg.theta);
        match fit_slope(&xs, &series.c_values, window, ctx.seed("correlation-fit")) {
            Ok(fit) => {
                r.slope("correlation", fit.slope, fit.half_width());
                r.check(
                    "correlation_slope",
                    slope_status(
                        fit.slope,
                        fit.half_width(),
                        target,
                        c.tolerance,
                        c.max_ci,
                        true,
                    ),
                );
            }
            // a vanishing covariance has no slope to fit
            Err(Error::DegenerateWindow(msg)) => {
                r.note("correlation_fit", msg);
                r.check("correlation_slope", Status::Inconclusive);
            }
            Err(e) => return Err(e.into()),
        }

        if !c.n_list.is_empty() {
            let other_name = if main.name() == "monte_carlo" {
                "spectral"
            } else {
                "monte_carlo"
            };
            let other = estimators.get(other_name)?;
            let a = main.estimate(&cx, phi.as_ref(), psi.as_ref(), &c.n_list)?;
            let b = other.estimate(&cx, phi.as_ref(), psi.as_ref(), &c.n_list)?;
            let zero = vec![0.0; c.n_list.len()];
            let (ca, cb) = (
                a.ci.as_ref().unwrap_or(&zero),
                b.ci.as_ref().unwrap_or(&zero),
            );
            let mut t = Table::new(
                "correlations_compare.csv",
                &["n", "primary", "primary_ci", "secondary", "secondary_ci"],
            );
            for k in 0..c.n_list.len() {
                t.push(vec![
                    c.n_list[k].to_string(),
                    num(a.signed[k]),
                    num(ca[k]),
                    num(b.signed[k]),
                    num(cb[k]),
                ]);
            }
            r.tables.push(t);
            r.note(
                "compare_estimators",
                format!("{} vs {}", main.name(), other_name),
            );
            r.check(
                "estimators_agree",
                Status::from_bool(disagreements(&a, &b).is_empty()),
            );
        }
        Ok(r)
    }
}

struct LargeDeviations;

impl Pipeline for LargeDeviations {
    fn name(&self) -> &'static str {
        "ld"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.ld;
        let phi = ObservableRegistry::default().build(&c.observable)?;
        let lc = LdConfig {
            ensemble: c.ensemble,
            members_per_chain: c.members_per_chain,
            burn_in: c.burn_in,
            stride: c.stride,
            seed: ctx.seed("ld"),
        };
        let all = large_deviation(ctx.model, phi.as_ref(), &c.eps_list, &c.n_list, &lc)?;
        let target = c.target.unwrap_or(-1.0 / ctx.cfg.theta);
        let mut r = Report::default();
        let mut t = Table::new("ld.csv", &["n", "eps", "LD", "ci_lo", "ci_hi"]);
        for s in &all {
            for k in 0..s.n_values.len() {
                t.push(vec![
                    s.n_values[k].to_string(),
                    num(s.eps),
                    num(s.ld[k]),
                    num(s.ci[k].0),
                    num(s.ci[k].1),
                ]);
            }
            // only the part of the curve above the noise floor is fitted
            let (xs, ys): (Vec<f64>, Vec<f64>) = s
                .n_values
                .iter()
                .zip(&s.ld)
                .filter(|(_, &v)| v >= c.floor)
                .map(|(&n, &v)| (n as f64, v))
                .unzip();
            let label = format!("ld_eps={}", s.eps);
            let window = (
                xs.first().copied().unwrap_or(0.0),
                xs.last().copied().unwrap_or(0.0),
            );
            match fit_slope(&xs, &ys, window, ctx.seed(&label)) {
                Ok(fit) => {
                    r.slope(&label, fit.slope, fit.half_width());
                    r.check(
                        &format!("{label}_slope"),
                        slope_status(
                            fit.slope,
                            fit.half_width(),
                            target,
                            c.tolerance,
                            c.max_ci,
                            true,
                        ),
                    );
                }
                Err(Error::DegenerateWindow(msg)) => {
                    r.note(&format!("{label}_fit"), msg);
                    r.check(&format!("{label}_slope"), Status::Inconclusive);
                }
                Err(e) => return Err(e.into()),
            }
        }
        r.tables.push(t);
        r.note("ld_floor", c.floor);
        if let Some(s) = all.first() {
            r.note("ld_space_average", format!("{:.6}", s.mean));
        }
        Ok(r)
    }
}

fn describe(s: &TowerState) -> String {
    match *s {
        TowerState::Level { level, bin } => format!("level:{level}:{bin}"),
        TowerState::Cell { cell, bin } => format!("cell:{cell}:{bin}"),
        TowerState::Neutral { left, depth, bin } => {
            format!("neutral:{}{depth}:{bin}", if left { "-" } else { "+" })
        }
        TowerState::Censored => "censored".into(),
    }
}

struct Spectra;

impl Pipeline for Spectra {
    fn name(&self) -> &'static str {
        "spectra"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.spectra;
        let schemes = UlamRegistry::default();
        let grid = ctx.grid(&c.grid, "spectra-grid");
        let d = ulam_discretize(
            ctx.model,
            ctx.table,
            &grid,
            schemes.get(&c.grid.scheme)?,
            &[],
        )?;
        let p = &d.matrix;
        let inv = invariant_density(p)?;
        let eig = second_eigenvalue(
            p,
            &inv.rho,
            ctx.seed("eigen"),
            c.eigen_tol,
            c.eigen_max_iter,
        );

        let mut r = Report::default();
        let mut t = Table::new("density.csv", &["state", "mass"]);
        for (s, m) in p.states.iter().zip(&inv.rho) {
            t.push(vec![describe(s), num(*m)]);
        }
        r.tables.push(t);
        if c.export_matrix {
            let mut t = Table::new("transfer.csv", &["row", "col", "prob"]);
            for (i, j, v) in p.triplets() {
                t.push(vec![i.to_string(), j.to_string(), num(v)]);
            }
            r.tables.push(t);
        }
        r.note("states", p.len());
        r.note("censored_fraction", format!("{:e}", d.censored_fraction));
        r.note("overflow_fraction", format!("{:e}", d.overflow_fraction));
        r.note("row_defect", format!("{:e}", p.max_row_defect()));
        r.note("density_residual", format!("{:e}", inv.residual));
        r.note("density_floor", format!("{:e}", inv.floor));
        r.note("second_eigenvalue", format!("{:.6}", eig.modulus));
        r.check(
            "row_sums",
            Status::from_bool(p.max_row_defect() <= c.exactness),
        );
        r.check(
            "density_residual",
            Status::from_bool(inv.residual <= c.exactness),
        );
        r.check("density_floor", Status::from_bool(inv.floor > 0.0));
        r.check(
            "tower_structure",
            Status::from_bool(p.respects_tower_structure()),
        );
        r.check(
            "second_eigenvalue_converged",
            if eig.converged {
                Status::Pass
            } else {
                Status::Inconclusive
            },
        );
        Ok(r)
    }
}

struct Couple;

impl Couple {
    fn config(
        ctx: &Context<'_>,
        densities: [BaseDensity; 2],
        cells: &CellConfig,
    ) -> Result<(CouplingConfig, f64), CliError> {
        let c = &ctx.cfg.couple;
        let m = ctx.model;
        let base = m.cells[BASE_CELL];
        let mut rng = stream(ctx.seed("jacobian-pairs"), 0);
        let width = base.u.1 - base.u.0;
        let pairs: Vec<(f64, f64)> = (0..c.jacobian_pairs)
            .map(|_| {
                let a = base.u.0 + width * (0.01 + 0.98 * rng.gen::<f64>());
                (a, a + width * 10f64.powf(-8.0 + 6.0 * rng.gen::<f64>()))
            })
            .collect();
        let jf = jacobian_regularity(m, ctx.table, &pairs, 1, ctx.cfg.model.cap)?;
        let zeta = c.zeta.unwrap_or(ctx.cfg.zeta_target());
        let mut cc =
            CouplingConfig::derive(jf.c_f, c.beta.unwrap_or(jf.beta), zeta, c.k_margin, c.lag)?;
        if let Some(rho) = c.rho {
            cc.rho = rho;
            cc.regularity = cc.k.exp() * (rho + 1.0);
            cc.i0 = first_admissible_index(cc.k, rho);
        }
        if let Some(i0) = c.i0 {
            cc.i0 = i0;
        }
        cc.validate(jf.c_f)?;
        if c.i0_auto {
            cc = select_i0(ctx.tower(), &cc, densities, cells, 50)?;
        }
        Ok((cc, jf.c_f))
    }
}

impl Pipeline for Couple {
    fn name(&self) -> &'static str {
        "couple"
    }

    fn run(&self, ctx: &Context<'_>) -> Result<Report, CliError> {
        let c = &ctx.cfg.couple;
        let tower = ctx.tower();
        let densities = [
            BaseDensity::new(c.amplitudes.0)?,
            BaseDensity::new(c.amplitudes.1)?,
        ];
        let cells = CellConfig {
            samples: c.cell_samples,
            stages: c.stages,
            points: c.grid_points,
            max_time: c.max_time,
            seed: ctx.seed("cells"),
        };
        let (cc, c_f) = Self::config(ctx, densities, &cells)?;
        let run = run_cells(tower, &cc, densities, &cells)?;

        let tc = TimesConfig {
            pairs: c.pairs,
            horizon: c.horizon,
            cap: ctx.cfg.model.cap,
            increments: c.increments,
            seed: ctx.seed("coupling-times"),
        };
        let times = sample_coupling_times(tower, densities, cc.lag, &tc)?;
        let tail = tail_histogram(times.first(), c.window, ctx.seed("coupling-bootstrap"))?;

        let chain_grid = UlamGrid {
            bins: c.chain_bins,
            max_level: c.chain_max_level,
            points_per_bin: c.chain_points,
            seed: ctx.seed("coupling-chain"),
            cap: ctx.cfg.model.cap,
            ..UlamGrid::default()
        };
        let d = ulam_discretize(ctx.model, ctx.table, &chain_grid, &TestPoints, &[])?;
        let first = base_distribution(&d.matrix, densities[0])?;
        let second = base_distribution(&d.matrix, densities[1])?;
        let tv = direct_tv(&d.matrix, &first, &second, &c.n_list)?;
        let pc = coupling_bound(&cc, &times, &c.n_list, &tv, 0.0)?;

        let mut r = Report::default();
        let mut t = Table::new(
            "coupling.csv",
            &["n", "direct_tv", "prop_c_bound", "p_T_gt_n"],
        );
        for k in 0..pc.n.len() {
            t.push(vec![
                pc.n[k].to_string(),
                num(pc.direct_tv[k]),
                num(pc.bound[k]),
                num(pc.p_t_gt_n[k]),
            ]);
        }
        r.tables.push(t);
        let mut t = Table::new(
            "coupling_stages.csv",
            &[
                "stage",
                "cells",
                "epsilon",
                "worst_ratio",
                "ratio_violations",
                "worst_decrease_margin",
                "decrease_violations",
                "worst_marginal_residual",
            ],
        );
        for s in &run.stages {
            t.push(vec![
                s.stage.to_string(),
                s.cells.to_string(),
                num(cc.epsilon(s.stage)),
                num(s.worst_ratio),
                s.ratio_violations.to_string(),
                num(s.worst_decrease_margin),
                s.decrease_violations.to_string(),
                num(s.worst_marginal_residual),
            ]);
        }
        r.tables.push(t);

        let hw = half_width(tail.slope_ci);
        r.slope("coupling_time", tail.slope, hw);
        r.note("c_f", format!("{c_f:.6}"));
        r.note("K", format!("{:.6}", cc.k));
        r.note("rho", cc.rho);
        r.note("beta", format!("{:.6}", cc.beta));
        r.note("zeta", cc.zeta);
        r.note("i0", cc.i0);
        r.note("k1", format!("{:e}", cc.k1()));
        r.note("skipped_cells", run.skipped);
        r.note("mean_T", format!("{:.4}", times.first().mean()));
        if let Some((stage, e)) = &run.negative {
            r.note("negative_density", format!("stage {stage}: {e}"));
        }
        let ratios_ok = run.stages.iter().all(|s| s.ratio_violations == 0);
        r.check("ratio_bound", Status::from_bool(ratios_ok));
        r.check("pointwise_decrease", Status::from_bool(run.all_decrease()));
        r.check(
            "marginal_residual",
            Status::from_bool(run.worst_marginal_residual() <= c.residual_tolerance),
        );
        r.check(
            "coupling_time_slope",
            slope_status(
                tail.slope,
                hw,
                -(cc.zeta - 1.0),
                c.tolerance,
                c.max_ci,
                false,
            ),
        );
        r.check("tv_bound", Status::from_bool(pc.holds));
        match increment_domination_check(&times.increments, (10, 200), MIN_INCREMENT_SAMPLES, 100) {
            Ok(inc) => {
                let k2: Vec<String> = inc
                    .k2
                    .iter()
                    .map(|k| k.map_or("-".into(), |v| format!("{v:.3}")))
                    .collect();
                r.note("k2", k2.join(" "));
                let complete = inc.k2.iter().all(|k| k.is_some_and(f64::is_finite));
                r.check(
                    "increment_domination",
                    if complete {
                        Status::Pass
                    } else {
                        Status::Inconclusive
                    },
                );
            }
            Err(Error::InsufficientSamples(msg)) => {
                r.note("k2", msg);
                r.check("increment_domination", Status::Inconclusive);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(r)
    }
}
