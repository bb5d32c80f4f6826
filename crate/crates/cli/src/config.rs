//! Run configuration: TOML with one table per pipeline. Every key has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use towerlab::model::ModelConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub theta: f64,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub out_dir: String,
    pub model: ModelSection,
    pub tails: TailsSection,
    pub validate: ValidateSection,
    pub correlations: CorrelationsSection,
    pub ld: LdSection,
    pub spectra: SpectraSection,
    pub couple: CoupleSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            theta: 0.5,
            workers: 0,
            out_dir: "out".into(),
            model: ModelSection::default(),
            tails: TailsSection::default(),
            validate: ValidateSection::default(),
            correlations: CorrelationsSection::default(),
            ld: LdSection::default(),
            spectra: SpectraSection::default(),
            couple: CoupleSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    pub cells: usize,
    pub transition: Option<Vec<Vec<u8>>>,
    pub a0: f64,
    pub a0_prime: f64,
    pub skew: f64,
    pub intermittent: bool,
    /// Boundary-sequence entries tabulated for level lookups.
    pub level_depth: usize,
    /// Orbits longer than this are censored.
    pub cap: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            lambda: m.lambda,
            cells: m.cells,
            transition: None,
            a0: m.a0,
            a0_prime: m.a0_prime,
            skew: m.skew,
            intermittent: m.intermittent,
            level_depth: 1_000_000,
            cap: towerlab::returns::DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSection {
    pub samples: usize,
    pub window: (u64, u64),
    /// Expected slope; defaults to `−(1/θ + 1)`.
    pub target: Option<f64>,
    pub tolerance: f64,
    /// Confidence half-widths above this make the check inconclusive.
    pub max_ci: f64,
}

impl Default for TailsSection {
    fn default() -> Self {
        TailsSection {
            samples: 1_000_000,
            window: (20, 500),
            target: None,
            tolerance: 0.35,
            max_ci: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub pairs: usize,
    pub steps: usize,
    pub kmax: u64,
    /// Largest admissible ratio of an envelope's maximum to its median.
    pub factor: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            pairs: 10_000,
            steps: 200,
            kmax: 500,
            factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub scheme: String,
    pub bins: usize,
    pub max_level: usize,
    pub exit_bins: usize,
    pub neutral_bins: usize,
    pub points_per_bin: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            scheme: "neutral-partition".into(),
            bins: 1024,
            max_level: 4000,
            exit_bins: 256,
            neutral_bins: 8,
            points_per_bin: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationsSection {
    pub phi: String,
    pub psi: String,
    pub estimator: String,
    /// Sampled lags for the Monte-Carlo comparison; empty skips it.
    pub n_list: Vec<u64>,
    pub window: (u64, u64),
    /// Lags in the fitting grid.
    pub fit_points: usize,
    /// Expected slope; defaults to `−1/θ`.
    pub target: Option<f64>,
    pub tolerance: f64,
    pub max_ci: f64,
    pub chains: usize,
    pub length: u64,
    pub burn_in: u64,
    pub batches_per_chain: usize,
    pub grid: GridSection,
}

impl Default for CorrelationsSection {
    fn default() -> Self {
        CorrelationsSection {
            phi: "cos:1".into(),
            psi: "unstable".into(),
            estimator: "spectral".into(),
            n_list: vec![10, 14, 20, 28, 40, 56, 80, 112, 160, 200],
            window: (10, 200),
            fit_points: 40,
            target: None,
            tolerance: 0.4,
            max_ci: 0.25,
            chains: 32,
            length: 3_000_000,
            burn_in: 100_000,
            batches_per_chain: 8,
            grid: GridSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdSection {
    pub observable: String,
    pub eps_list: Vec<f64>,
    pub n_list: Vec<u64>,
    pub ensemble: usize,
    pub members_per_chain: usize,
    pub burn_in: u64,
    /// Spacing between ensemble members; 0 uses the longest window.
    pub stride: u64,
    /// Only `n` with LD at or above this enter the fit.
    pub floor: f64,
    /// Expected slope; defaults to `−1/θ`.
    pub target: Option<f64>,
    pub tolerance: f64,
    pub max_ci: f64,
}

impl Default for LdSection {
    fn default() -> Self {
        LdSection {
            observable: "cos:1".into(),
            eps_list: vec![0.1, 0.2, 0.3],
            n_list: vec![
                10, 13, 17, 22, 28, 37, 48, 62, 80, 103, 134, 173, 224, 289, 374, 500,
            ],
            ensemble: 1_000_000,
            members_per_chain: 1000,
            burn_in: 100_000,
            stride: 0,
            floor: 1e-4,
            target: None,
            tolerance: 0.5,
            max_ci: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraSection {
    pub grid: GridSection,
    /// Also write the transition triplets.
    pub export_matrix: bool,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
    /// Tolerance for row sums and the invariant-density residual.
    pub exactness: f64,
}

impl Default for SpectraSection {
    fn default() -> Self {
        SpectraSection {
            grid: GridSection::default(),
            export_matrix: false,
            eigen_tol: 1e-6,
            eigen_max_iter: 20_000,
            exactness: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleSection {
    #[serde(rename = "K_margin")]
    pub k_margin: f64,
    /// Defaults to `ζ + 1.5`.
    pub rho: Option<f64>,
    /// Defaults to the rate fitted from Jacobian ratios.
    pub beta: Option<f64>,
    /// Raise `i0` until the sampled ratio bound holds.
    pub i0_auto: bool,
    pub i0: Option<usize>,
    /// Defaults to `1/θ + 1`.
    pub zeta: Option<f64>,
    pub lag: u64,
    /// Base densities are `1 + A·cos 2πu`; these are the two amplitudes.
    pub amplitudes: (f64, f64),
    pub jacobian_pairs: usize,
    pub pairs: usize,
    pub horizon: u64,
    pub increments: usize,
    pub cell_samples: usize,
    pub stages: usize,
    pub grid_points: usize,
    pub max_time: u64,
    pub chain_bins: usize,
    pub chain_max_level: usize,
    pub chain_points: usize,
    pub n_list: Vec<u64>,
    pub window: (u64, u64),
    pub tolerance: f64,
    pub max_ci: f64,
    pub residual_tolerance: f64,
}

impl Default for CoupleSection {
    fn default() -> Self {
        CoupleSection {
            k_margin: 1.05,
            rho: None,
            beta: None,
            i0_auto: true,
            i0: None,
            zeta: None,
            lag: 1,
            amplitudes: (0.0, 0.5),
            jacobian_pairs: 20_000,
            pairs: 100_000,
            horizon: 1000,
            increments: 11,
            cell_samples: 64,
            stages: 8,
            grid_points: 16,
            max_time: 50_000,
            chain_bins: 64,
            chain_max_level: 2000,
            chain_points: 20_000,
            n_list: towerlab::returns::log_grid(1, 1000, 20),
            window: (20, 500),
            tolerance: 0.4,
            max_ci: 0.25,
            residual_tolerance: 1e-10,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            theta: self.theta,
            lambda: m.lambda,
            cells: m.cells,
            transition: m.transition.clone(),
            a0: m.a0,
            a0_prime: m.a0_prime,
            skew: m.skew,
            intermittent: m.intermittent,
        }
    }

    /// Tail exponent `1/θ + 1` of the return time.
    pub fn zeta_target(&self) -> f64 {
        1.0 / self.theta + 1.0
    }

    /// SHA-256 of the settings that determine the outputs. The output
    /// directory and worker count are left out.
    pub fn hash(&self) -> String {
        // TOML integers are signed, so the seed is hashed separately
        let c = Config {
            seed: 0,
            workers: 0,
            out_dir: String::new(),
            ..self.clone()
        };
        let mut h = Sha256::new();
        h.update(toml::to_string(&c).expect("configuration serializes"));
        h.update(format!("seed={}", self.seed));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
    }

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let back: Config = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_and_renamed_keys() {
        let c: Config =
            toml::from_str("seed = 9\n[tails]\nsamples = 5\n[couple]\nK_margin = 1.2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.tails.samples, 5);
        assert_eq!(c.couple.k_margin, 1.2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[tails]\nsample = 5\n").is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = Config::default();
        let b = Config {
            out_dir: "elsewhere".into(),
            workers: 3,
            ..Config::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = Config {
            seed: 2,
            ..Config::default()
        };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        let big = Config {
            seed: u64::MAX,
            ..Config::default()
        };
        assert_ne!(big.hash(), a.hash());
    }
}
