use proptest::prelude::*;
use towerlab::coupling::{decrease_factor, epsilon_schedule, first_admissible_index};
use towerlab::fit::fit_slope;
use towerlab::intermittent::{
    boundary_sequence, phi, phi_derivative, phi_inverse, IntermittentParams, Side,
};
use towerlab::returns::{log_grid, ReturnHistogram};
use towerlab::stats::wilson;

fn params(theta: f64) -> IntermittentParams {
    IntermittentParams::new(theta, 0.5, -0.5).unwrap()
}

proptest! {
    #[test]
    fn inverse_undoes_the_neutral_map(theta in 0.05f64..=1.0, a in -0.25f64..0.25) {
        let p = params(theta);
        let b = phi(a, &p).unwrap();
        prop_assert!(b.abs() >= a.abs());
        prop_assert!((phi_inverse(b, &p).unwrap() - a).abs() <= 1e-13 * (1.0 + a.abs()));
        prop_assert!(phi_derivative(a, &p) >= 1.0);
    }

    #[test]
    fn boundary_sequences_shrink_and_tile(theta in 0.1f64..=1.0, n in 1usize..400, right in any::<bool>()) {
        let p = params(theta);
        let side = if right { Side::Right } else { Side::Left };
        let seq = boundary_sequence(&p, side, n).unwrap();
        prop_assert_eq!(seq.len(), n + 1);
        for k in 0..n {
            let (outer, inner) = (seq.values[k], seq.values[k + 1]);
            prop_assert!(inner.abs() < outer.abs() && inner * outer > 0.0);
            prop_assert!((phi(inner, &p).unwrap() - outer).abs() <= 1e-12);
            prop_assert_eq!(seq.level_of(0.5 * (outer + inner)), Some(k));
        }
    }

    #[test]
    fn epsilon_schedule_is_decreasing_and_admissible(k in 0.01f64..3.0, rho in 1.1f64..8.0) {
        let i0 = first_admissible_index(k, rho);
        prop_assert!(epsilon_schedule(k, rho, i0) < 1.0);
        if i0 > 1 {
            prop_assert!(epsilon_schedule(k, rho, i0 - 1) >= 1.0);
        }
        for i in 1..50 {
            prop_assert!(epsilon_schedule(k, rho, i + 1) < epsilon_schedule(k, rho, i));
            let d = decrease_factor(rho, i + 1);
            prop_assert!(d > 0.0 && d < 1.0);
        }
    }

    #[test]
    fn log_grid_is_sorted_and_bounded(lo in 1u64..100, span in 1u64..10_000, points in 2usize..60) {
        let hi = lo + span;
        let g = log_grid(lo, hi, points);
        prop_assert!(!g.is_empty() && g.len() <= points);
        prop_assert_eq!((g[0], *g.last().unwrap()), (lo, hi));
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn histogram_merge_matches_direct_recording(rs in prop::collection::vec(1u64..200, 0..300), split in 0usize..300) {
        let split = split.min(rs.len());
        let (mut whole, mut left, mut right) = (ReturnHistogram::new(150), ReturnHistogram::new(150), ReturnHistogram::new(150));
        rs.iter().for_each(|&r| whole.record(r));
        rs[..split].iter().for_each(|&r| left.record(r));
        rs[split..].iter().for_each(|&r| right.record(r));
        left.merge(&right);
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(whole.total(), rs.len() as u64);
        prop_assert_eq!(whole.exceeding(50), rs.iter().filter(|&&r| r > 50).count() as u64);
    }

    #[test]
    fn wilson_interval_brackets_the_frequency(n in 1u64..100_000, frac in 0.0f64..=1.0) {
        let hits = ((n as f64) * frac).floor() as u64;
        let (lo, hi) = wilson(hits, n);
        let p = hits as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-15 && p <= hi + 1e-15 && hi <= 1.0);
    }

    #[test]
    fn exact_power_laws_fit_exactly(exponent in -4.0f64..-0.5, scale in 1e-6f64..1e3) {
        let xs: Vec<f64> = (1..=40).map(|k| 10.0 * 1.1f64.powi(k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| scale * x.powf(exponent)).collect();
        let fit = fit_slope(&xs, &ys, (xs[0], *xs.last().unwrap()), 3).unwrap();
        prop_assert!((fit.slope - exponent).abs() < 1e-9);
        prop_assert!(fit.half_width() < 1e-9);
    }
}
