#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use mcei::simulation::{
    generate, generate_with_latents, scaled_mse, true_effect_oracle, OutcomeLink, SimConfig,
};
use proptest::prelude::*;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0),
    )
}

#[test]
fn moments_match_analytic_values() {
    for (k, &gamma) in [0.2, 0.5, 0.8].iter().enumerate() {
        let cfg = SimConfig {
            n: 10_000,
            t: 10,
            gamma,
            seed: 30 + k as u64,
            ..SimConfig::default()
        };
        let (data, truth) = generate(&cfg).unwrap();
        let sd = cfg.sim_sd;
        for i in 0..cfg.t {
            let w2: f64 = truth.w.row(i).iter().map(|w| w * w).sum();
            let expected = gamma * gamma * w2 + (1.0 - gamma).powi(2) + sd * sd;
            let (m, v) = mean_var(&data.treatments.column(i));
            assert!(
                (v - expected).abs() <= 0.05 * expected,
                "γ={gamma} t_{i}: var {v} vs {expected}"
            );
            assert!(
                m.abs() <= 0.05 * expected.sqrt(),
                "γ={gamma} t_{i}: mean {m}"
            );
        }
        // E|z| = γ√(2/π), Var|z| = γ²(1 − 2/π)
        let bz_sum: f64 = truth.b_z.iter().sum();
        let bz_sq: f64 = truth.b_z.iter().map(|b| b * b).sum();
        let be_sq: f64 = truth.b_eps.iter().map(|b| b * b).sum();
        let mean_y = gamma * gamma * (2.0 / PI).sqrt() * bz_sum;
        let var_y = (1.0 - gamma).powi(4) * be_sq
            + gamma.powi(4) * (1.0 - 2.0 / PI) * bz_sq
            + cfg.outcome_sd * cfg.outcome_sd;
        let (m, v) = mean_var(data.outcome().unwrap());
        assert!(
            (v - var_y).abs() <= 0.05 * var_y,
            "γ={gamma}: var y {v} vs {var_y}"
        );
        assert!(
            (m - mean_y).abs() <= 0.05 * var_y.sqrt().max(mean_y),
            "γ={gamma}: mean y {m} vs {mean_y}"
        );
    }
}

/// Interventional mean `E_z[f(t, z)]` of the structural outcome, by
/// tensor-product midpoint quadrature over a 2-D standard-normal `z`.
fn do_mean(cfg: &SimConfig, truth: &mcei::simulation::SimTruth, t: &[f64]) -> f64 {
    let g = cfg.gamma;
    let (k, lim) = (400, 8.0);
    let h = 2.0 * lim / k as f64;
    let mut total = 0.0;
    for a in 0..k {
        let u = -lim + (a as f64 + 0.5) * h;
        for b in 0..k {
            let v = -lim + (b as f64 + 0.5) * h;
            let w = (-(u * u + v * v) / 2.0).exp() / (2.0 * PI) * h * h;
            let z = [g * u, g * v];
            // under do(t) the treatment-specific part is ε = t − W z
            let direct: f64 = (0..t.len())
                .map(|i| {
                    let wz: f64 = truth.w.row(i).iter().zip(&z).map(|(w, zz)| w * zz).sum();
                    truth.b_eps[i] * (t[i] - wz)
                })
                .sum();
            let conf: f64 = truth.b_z.iter().zip(&z).map(|(b, zz)| b * zz.abs()).sum();
            total += w * ((1.0 - g) * direct + g * conf);
        }
    }
    total
}

#[test]
fn true_effects_match_interventional_differences() {
    let cfg = SimConfig {
        n: 10,
        t: 4,
        d: 2,
        gamma: 0.6,
        seed: 3,
        ..SimConfig::default()
    };
    let (_, truth) = generate(&cfg).unwrap();
    let oracle = true_effect_oracle(&truth);
    let base = [0.3, -0.2, 0.5, 0.1];
    for i in 0..cfg.t {
        let mut hi = base;
        let mut lo = base;
        hi[i] += 0.5;
        lo[i] -= 0.5;
        let effect = do_mean(&cfg, &truth, &hi) - do_mean(&cfg, &truth, &lo);
        assert!(
            (effect - oracle[i]).abs() < 1e-8,
            "treatment {i}: {effect} vs {}",
            oracle[i]
        );
    }
}

#[test]
fn linear_link_and_signed_loadings() {
    let cfg = SimConfig {
        n: 200,
        t: 30,
        gamma: 0.5,
        outcome_link: OutcomeLink::Linear,
        signed_loadings: true,
        ..SimConfig::default()
    };
    let draw = generate_with_latents(&cfg).unwrap();
    assert!(draw.truth.w.as_slice().iter().any(|&w| w < 0.0));
    let y = draw.dataset.outcome().unwrap();
    for r in 0..5 {
        let direct: f64 = draw
            .eps
            .row(r)
            .iter()
            .zip(&draw.truth.b_eps)
            .map(|(e, b)| e * b)
            .sum();
        let conf: f64 = draw
            .z
            .row(r)
            .iter()
            .zip(&draw.truth.b_z)
            .map(|(z, b)| z * b)
            .sum();
        let noiseless = 0.5 * direct + 0.5 * conf;
        assert!((y[r] - noiseless).abs() < 6.0 * cfg.outcome_sd);
    }
}

fn rotate(v: &mut [f64], a: usize, b: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let (x, y) = (v[a], v[b]);
    v[a] = c * x - s * y;
    v[b] = s * x + c * y;
}

proptest! {
    #[test]
    fn scaled_mse_is_rotation_invariant(
        pairs in prop::collection::vec((-3.0f64..3.0, 0.1f64..3.0), 2..8),
        rotations in prop::collection::vec((0usize..8, 0usize..8, -3.2f64..3.2), 1..10),
    ) {
        let mut est: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let before = scaled_mse(&est, &truth).unwrap();
        let n = est.len();
        for (a, b, angle) in rotations {
            let (a, b) = (a % n, b % n);
            if a != b {
                rotate(&mut est, a, b, angle);
                rotate(&mut truth, a, b, angle);
            }
        }
        let after = scaled_mse(&est, &truth).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000, stream in 0u64..4, gamma in 0.0f64..0.95) {
        let cfg = SimConfig { n: 20, t: 3, seed, stream, gamma, ..SimConfig::default() };
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
