//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the target
//! exits non-zero if any criterion fails. Criteria run sequentially so that their
//! wall-clock budgets are measured without contention.

#![allow(clippy::needless_range_loop)]

use std::time::{Duration, Instant};

use mcei::ami::{aux_bound, gaussian_cmi_oracle, optimize_aux, AuxFamily, AuxFitConfig};
use mcei::baselines::{ppca_posterior, PpcaModel};
use mcei::confounder::{
    fit, marginal_entropy_estimate, mclbo_gradients, mclbo_objective, split_rows, BoundChoice,
    ConfounderParams, TrainConfig,
};
use mcei::gaussian::{CondGaussian, NoiseDraw, Scale};
use mcei::harness::{
    read_results_csv, run_sweep, summarize, write_results_csv, EffectConfig, ExperimentConfig,
    Method,
};
use mcei::numeric::{
    finite_diff_grad, Activation, Layer, Matrix, Mlp, OptimizerKind, Parameterized, RngStream, Tape,
};
use mcei::outcome::{OutcomeArch, OutcomeConfig};
use mcei::residuals::{
    fit_lagrangian_residuals, independence_report, invert_residuals, LagrangianConfig,
};
use mcei::simulation::{generate, OutcomeLink, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn record(
    results: &mut Vec<(String, bool)>,
    name: &str,
    budget: Option<Duration>,
    run: impl FnOnce() -> Outcome,
) {
    // MCEI_ACCEPTANCE=c1,c4 runs a subset
    if let Ok(only) = std::env::var("MCEI_ACCEPTANCE") {
        let id = name.split_whitespace().next().unwrap_or(name);
        if !only.split(',').any(|s| s.trim() == id) {
            println!("SKIP {name}");
            return;
        }
    }
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = out.pass && in_time;
    let budget_note = match budget {
        Some(b) => format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64()),
        None => format!("{:.1}s", elapsed.as_secs_f64()),
    };
    println!(
        "{} {name}: {} [{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    results.push((name.to_string(), pass));
}

/// Training settings shared by the trained criteria.
fn desk_train() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        learning_rate: 0.005,
        final_lr_fraction: 0.1,
        optimizer: OptimizerKind::Adam,
        alpha_grid: vec![0.0, 0.1, 1.0, 5.0],
        ..TrainConfig::default()
    }
}

fn desk_outcome() -> OutcomeConfig {
    OutcomeConfig {
        arch: OutcomeArch::PartiallyLinear,
        ..OutcomeConfig::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn small_instance() -> (ConfounderParams, Matrix, NoiseDraw) {
    let config = TrainConfig {
        latent_dim: 2,
        hidden_width: 4,
        ..TrainConfig::default()
    };
    let mut rng = RngStream::new(42, 0);
    let params = ConfounderParams::init(3, &config, &mut rng).unwrap();
    let batch = rng.normal_matrix(8, 3);
    let noise = NoiseDraw::draw(&mut rng, 8, 2);
    (params, batch, noise)
}

fn criterion_1() -> Outcome {
    let (params, batch, noise) = small_instance();
    let alpha = 0.7;
    let g = mclbo_gradients(&params, &batch, &noise, alpha, &BoundChoice::Auxiliary).unwrap();
    let auto: Vec<f64> = g
        .encoder
        .iter()
        .chain(&g.decoder)
        .chain(&g.aux)
        .flat_map(|m| m.as_slice().to_vec())
        .collect();
    let point = params.flat();
    let fd = finite_diff_grad(
        |x| {
            let mut p = params.clone();
            p.set_flat(x);
            mclbo_objective(&p, &batch, &noise, alpha)
                .unwrap()
                .objective
        },
        &point,
        1e-5,
    );
    // relative error with a floor for entries that vanish analytically
    let worst = auto
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max);
    Outcome {
        pass: auto.len() == fd.len() && worst <= 1e-4,
        detail: format!("{} parameters, max relative error {worst:.2e}", fd.len()),
    }
}

/// Gradient of `Σ_i log p_β(t_i | z)` with `z` held fixed (β part).
fn beta_formula(params: &ConfounderParams, batch: &Matrix, z: &Matrix) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let dec = params.decoder.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let tv = tape.constant(batch.clone());
    let lp = dec.log_prob(&mut tape, zv, tv);
    let obj = tape.mean(lp);
    let g = tape.backward(obj).unwrap();
    dec.leaves().iter().map(|&v| g.wrt(v)).collect()
}

/// `α Σ_i ∇ξ_i log r_i(z | t_{-i})` with `z` held fixed (ξ part).
fn xi_formula(params: &ConfounderParams, batch: &Matrix, z: &Matrix, alpha: f64) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let aux = params.aux.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let mut terms = Vec::new();
    for (i, r) in aux.iter().enumerate() {
        let tm = tape.constant(batch.drop_column(i));
        let lp = r.log_prob(&mut tape, tm, zv);
        terms.push(tape.mean(lp));
    }
    let all = tape.hcat(&terms);
    let sum = tape.sum(all);
    let obj = tape.scale(sum, alpha);
    let g = tape.backward(obj).unwrap();
    aux.iter()
        .flat_map(|a| a.leaves())
        .map(|v| g.wrt(v))
        .collect()
}

/// Pathwise θ part: `∇θ z · ∇z[Σ_i log p_β(t_i|z) + α Σ_i log r_i(z|t_{-i}) − αT log p_θ(z|t)]`,
/// with the density `p_θ(z | t)` evaluated at frozen parameters.
fn theta_formula(
    params: &ConfounderParams,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
) -> Vec<f64> {
    let t = batch.cols();
    let mut tape = Tape::new();
    let enc = params.encoder.bind(&mut tape);
    let enc_frozen = params.encoder.bind_frozen(&mut tape);
    let dec = params.decoder.bind_frozen(&mut tape);
    let aux = params.aux.bind_frozen(&mut tape);
    let tv = tape.constant(batch.clone());
    let delta = tape.constant(noise.delta().clone());
    let (z, _, _) = enc.reparam_sample(&mut tape, tv, delta);
    let recon = dec.log_prob(&mut tape, z, tv);
    let mut total = tape.mean(recon);
    for (i, r) in aux.iter().enumerate() {
        let tm = tape.constant(batch.drop_column(i));
        let lp = r.log_prob(&mut tape, tm, z);
        let m = tape.mean(lp);
        let m = tape.scale(m, alpha);
        total = tape.add(total, m);
    }
    let lq = enc_frozen.log_prob(&mut tape, tv, z);
    let mq = tape.mean(lq);
    let mq = tape.scale(mq, -alpha * t as f64);
    total = tape.add(total, mq);
    let g = tape.backward(total).unwrap();
    enc.leaves()
        .iter()
        .flat_map(|&v| g.wrt(v).into_vec())
        .collect()
}

fn max_abs_diff(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let (params, batch, _) = small_instance();
    let alpha = 0.7;
    let mut rng = RngStream::new(7, 0);
    let draws = 10_000;
    let n_theta = params.encoder.num_params();
    let mut sum = vec![0.0; n_theta];
    let mut sum_sq = vec![0.0; n_theta];
    let mut exact_err: f64 = 0.0;
    for k in 0..draws {
        let noise = NoiseDraw::draw(&mut rng, batch.rows(), 2);
        let g = mclbo_gradients(&params, &batch, &noise, alpha, &BoundChoice::Auxiliary).unwrap();
        if k < 100 {
            let z = params.encoder.reparam_sample(&batch, &noise).unwrap();
            exact_err = exact_err
                .max(max_abs_diff(&g.decoder, &beta_formula(&params, &batch, &z)))
                .max(max_abs_diff(
                    &g.aux,
                    &xi_formula(&params, &batch, &z, alpha),
                ));
        }
        let auto: Vec<f64> = g
            .encoder
            .iter()
            .flat_map(|m| m.as_slice().to_vec())
            .collect();
        let formula = theta_formula(&params, &batch, &noise, alpha);
        for (j, (a, f)) in auto.iter().zip(&formula).enumerate() {
            let d = a - f;
            sum[j] += d;
            sum_sq[j] += d * d;
        }
    }
    let n = draws as f64;
    let worst_z = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, sq)| {
            let mean = s / n;
            let var = (sq - n * mean * mean) / (n - 1.0);
            let se = (var / n).sqrt();
            if se > 0.0 {
                mean.abs() / se
            } else if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: exact_err <= 1e-10 && worst_z <= 3.0,
        detail: format!(
            "β/ξ max |diff| {exact_err:.1e}; θ max |mean diff|/SE {worst_z:.2} over {n_theta} coordinates"
        ),
    }
}

fn criterion_3() -> Outcome {
    // Each treatment loads on one confounder coordinate, so every
    // conditional p(z | t_{-i}) is diagonal and the linear family contains it.
    let (t, d, noise_sd) = (5, 2, 0.8);
    let w = Matrix::from_rows(&[
        vec![1.2, 0.0],
        vec![0.0, 0.9],
        vec![0.8, 0.0],
        vec![0.0, 1.1],
        vec![1.0, 0.0],
    ]);
    let nv = noise_sd * noise_sd;
    let wtw = w.transpose().matmul(&w);
    let post_var: Vec<f64> = (0..d).map(|k| 1.0 / (1.0 + wtw.get(k, k) / nv)).collect();
    let mut gain = w.transpose();
    for k in 0..d {
        for c in 0..t {
            gain.set(k, c, gain.get(k, c) * post_var[k] / nv);
        }
    }
    let mean = Mlp::from_layers(vec![Layer {
        weight: gain,
        bias: Matrix::zeros(1, d),
        activation: Activation::Identity,
    }])
    .unwrap();
    let post_sd: Vec<f64> = post_var.iter().map(|v| v.sqrt()).collect();
    let encoder = CondGaussian::new(mean, Scale::constant(&post_sd).unwrap()).unwrap();

    let mut joint = Matrix::zeros(d + t, d + t);
    let wwt = w.matmul(&w.transpose());
    for a in 0..d {
        joint.set(a, a, 1.0);
        for c in 0..t {
            joint.set(a, d + c, w.get(c, a));
            joint.set(d + c, a, w.get(c, a));
        }
    }
    for r in 0..t {
        for c in 0..t {
            joint.set(d + r, d + c, wwt.get(r, c) + if r == c { nv } else { 0.0 });
        }
    }

    let sample = |rng: &mut RngStream, n: usize| {
        let z = rng.normal_matrix(n, d);
        let mut x = z.matmul(&w.transpose());
        x.axpy(noise_sd, &rng.normal_matrix(n, t));
        x
    };
    let mut rng = RngStream::new(5, 0);
    let train = sample(&mut rng, 20_000);
    let eval = sample(&mut rng, 100_000);
    let eval_noise = NoiseDraw::draw(&mut rng, eval.rows(), d);
    let mut aux = AuxFamily::linear(t, d, 1.0, &mut rng).unwrap();

    let oracle: Vec<f64> = (0..t)
        .map(|i| gaussian_cmi_oracle(&joint, d, i).unwrap())
        .collect();
    let mut valid = true;
    let mut worst_valid = f64::NEG_INFINITY;
    for (i, &mi) in oracle.iter().enumerate() {
        let b = aux_bound(&encoder, &aux, &eval, &eval_noise, i).unwrap();
        valid &= b.value <= -mi + 3.0 * b.stderr;
        worst_valid = worst_valid.max((b.value + mi) / b.stderr);
    }
    let fit_config = AuxFitConfig {
        steps: 4000,
        batch_size: 1024,
        ..AuxFitConfig::default()
    };
    optimize_aux(&encoder, &mut aux, &train, &fit_config, &mut rng).unwrap();
    let mut worst_gap: f64 = 0.0;
    for (i, &mi) in oracle.iter().enumerate() {
        let b = aux_bound(&encoder, &aux, &eval, &eval_noise, i).unwrap();
        worst_gap = worst_gap.max((-mi - b.value) / mi.abs());
    }
    Outcome {
        pass: valid && worst_gap <= 0.1,
        detail: format!(
            "before fit max (G + I)/SE {worst_valid:.2}; after fit max gap/|I| {worst_gap:.3} (I = {:?})",
            oracle.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    }
}

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    for a in 0..10 {
        let sigma = 0.1 + 0.2 * a as f64;
        for b in 0..10 {
            let kappa = 0.05 + 0.1 * b as f64;
            let model = PpcaModel::scalar(sigma, kappa).unwrap();
            for &t in &[-2.0, 0.3, 1.5] {
                let (mean, cov) = ppca_posterior(&model, &[t]).unwrap();
                let shrink = sigma / (sigma + kappa);
                worst = worst
                    .max((mean[0] - shrink * t).abs())
                    .max((cov.get(0, 0) - sigma * sigma * (1.0 - shrink)).abs());
            }
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max deviation {worst:.1e}"),
    }
}

fn criterion_5() -> Outcome {
    let sim = SimConfig {
        n: 5000,
        t: 20,
        d: 2,
        gamma: 0.5,
        seed: 11,
        ..SimConfig::default()
    };
    let (data, _) = generate(&sim).unwrap();
    let train = TrainConfig {
        seed: 3,
        ..desk_train()
    };
    let fitted = fit(&data.treatments, &train).unwrap();
    let mut rng = RngStream::new(1, 0);
    let noise = NoiseDraw::draw(&mut rng, data.n(), 2);
    let res = invert_residuals(&fitted, &data.treatments, &noise).unwrap();

    let mu = fitted.decoder().mean(&res.z_samples).unwrap();
    let s = fitted.decoder_scales();
    let mut roundtrip: f64 = 0.0;
    for r in 0..data.n() {
        for i in 0..data.t() {
            let back = mu.get(r, i) + s[i] * res.epsilon.get(r, i);
            roundtrip = roundtrip.max((back - data.treatments.get(r, i)).abs());
        }
    }
    let max_corr = independence_report(&res).unwrap().max_abs;

    let lag_config = LagrangianConfig {
        steps: 1500,
        ..LagrangianConfig::default()
    };
    let (lag, _) = fit_lagrangian_residuals(&data.treatments, &res.z_samples, &lag_config).unwrap();
    let min_rho = (0..data.t())
        .map(|i| pearson(&lag.epsilon.column(i), &res.epsilon.column(i)).abs())
        .fold(f64::INFINITY, f64::min);
    Outcome {
        pass: roundtrip <= 1e-9 && max_corr <= 0.1 && min_rho >= 0.95,
        detail: format!(
            "roundtrip {roundtrip:.1e}; max |corr(ε, z)| {max_corr:.3}; min |ρ| {min_rho:.3}"
        ),
    }
}

fn criterion_6() -> Outcome {
    let config = ExperimentConfig {
        gammas: vec![0.2, 0.5, 0.8],
        redraws: 2,
        n: 2000,
        t: 20,
        d: 2,
        methods: vec![Method::Mcei, Method::PcaCorrect, Method::Naive],
        fit_dims: vec![2, 10],
        train: desk_train(),
        outcome: desk_outcome(),
        effects: EffectConfig::default(),
        seed: 0,
        ..ExperimentConfig::default()
    };
    let rows = run_sweep(&config).unwrap();
    let summary = summarize(&rows);
    let mean = |g: f64, m: Method, fd: usize| {
        summary
            .get(g, m, fd)
            .filter(|r| r.failed == 0)
            .and_then(|r| r.mean)
    };
    let mut table = Vec::new();
    let mut ok = true;
    let mut naive_prev = f64::NEG_INFINITY;
    let mut naive_increasing = true;
    let mut below_one = true;
    let mut misspec = true;
    for &g in &config.gammas {
        let (Some(naive), Some(m2), Some(m10), Some(p2), Some(p10)) = (
            mean(g, Method::Naive, 2),
            mean(g, Method::Mcei, 2),
            mean(g, Method::Mcei, 10),
            mean(g, Method::PcaCorrect, 2),
            mean(g, Method::PcaCorrect, 10),
        ) else {
            ok = false;
            continue;
        };
        naive_increasing &= naive > naive_prev;
        naive_prev = naive;
        below_one &= m2 < 1.0 && m10 < 1.0;
        misspec &= m10 - m2 <= (p10 - p2) + 0.05;
        table.push(format!(
            "γ={g}: naive {naive:.3} mcei {m2:.3}/{m10:.3} pca {p2:.3}/{p10:.3}"
        ));
    }
    let beats_at_high = match (mean(0.8, Method::Naive, 2), mean(0.8, Method::Mcei, 2)) {
        (Some(n), Some(m)) => n > m,
        _ => false,
    };
    Outcome {
        pass: ok && naive_increasing && beats_at_high && below_one && misspec,
        detail: format!(
            "(a) {} (b) {} (c) {}; {}",
            naive_increasing && beats_at_high,
            below_one,
            misspec,
            table.join("; ")
        ),
    }
}

fn criterion_7() -> Outcome {
    let mut means = Vec::new();
    for t in [5usize, 15, 50] {
        let config = ExperimentConfig {
            gammas: vec![0.5],
            redraws: 3,
            n: 4000,
            t,
            d: 2,
            outcome_link: OutcomeLink::Linear,
            signed_loadings: true,
            methods: vec![Method::Mcei],
            fit_dims: vec![2],
            train: desk_train(),
            outcome: desk_outcome(),
            effects: EffectConfig::default(),
            seed: 0,
            ..ExperimentConfig::default()
        };
        let rows = run_sweep(&config).unwrap();
        let row = summarize(&rows).get(0.5, Method::Mcei, 2).cloned();
        means.push(
            row.filter(|r| r.failed == 0 && r.count == 3)
                .and_then(|r| r.mean),
        );
    }
    let vals: Vec<f64> = means.iter().map(|m| m.unwrap_or(f64::NAN)).collect();
    let non_increasing = vals.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        pass: non_increasing,
        detail: format!(
            "mean scaled MSE at T=5,15,50: {:.3}, {:.3}, {:.3}",
            vals[0], vals[1], vals[2]
        ),
    }
}

fn criterion_8() -> Outcome {
    let fit_at = |gamma: f64| {
        let sim = SimConfig {
            n: 2000,
            t: 20,
            d: 2,
            gamma,
            seed: 21,
            ..SimConfig::default()
        };
        let (data, _) = generate(&sim).unwrap();
        let train = TrainConfig {
            steps: 1000,
            seed: 4,
            ..desk_train()
        };
        let fitted = fit(&data.treatments, &train).unwrap();
        (data, train, fitted)
    };
    let (_, train0, unconf) = fit_at(0.0);
    let grid_max = train0
        .alpha_grid
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let picks_max = unconf.chosen_alpha == grid_max;

    let (data, train, conf) = fit_at(0.8);
    let root = RngStream::new(train.seed, 0);
    let (_, hold) = split_rows(
        data.n(),
        train.holdout_fraction,
        &mut root.child_named("split"),
    )
    .unwrap();
    let ceiling = marginal_entropy_estimate(&data.treatments.select_rows(&hold));
    let score = conf
        .alpha_results
        .iter()
        .find(|r| r.alpha == conf.chosen_alpha)
        .and_then(|r| r.holdout_score)
        .unwrap_or(f64::INFINITY);
    let beats = score <= ceiling - 0.1 * ceiling.abs();
    Outcome {
        pass: picks_max && beats,
        detail: format!(
            "γ=0 selects α={} (grid max {grid_max}); γ=0.8 score {score:.3} vs ceiling {ceiling:.3}",
            unconf.chosen_alpha
        ),
    }
}

fn criterion_9() -> Outcome {
    let config = ExperimentConfig {
        gammas: vec![0.3, 0.7],
        redraws: 1,
        n: 300,
        t: 6,
        d: 2,
        fit_dims: vec![2],
        train: TrainConfig {
            steps: 100,
            alpha_grid: vec![0.0, 1.0],
            ..desk_train()
        },
        outcome: OutcomeConfig {
            steps: 200,
            ..desk_outcome()
        },
        effects: EffectConfig {
            probes: 10,
            ..EffectConfig::default()
        },
        seed: 17,
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for p in &paths {
        write_results_csv(p, &run_sweep(&config).unwrap()).unwrap();
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    let rows = read_results_csv(&paths[0]).unwrap();
    let all_ok = rows.iter().all(|r| r.is_ok());
    Outcome {
        pass: a == b && all_ok,
        detail: format!(
            "{} rows, {} bytes, identical: {}",
            rows.len(),
            a.len(),
            a == b
        ),
    }
}

fn main() {
    let mut results = Vec::new();
    record(
        &mut results,
        "c1 mclbo finite differences",
        Some(Duration::from_secs(5)),
        criterion_1,
    );
    record(
        &mut results,
        "c2 analytic gradients",
        Some(Duration::from_secs(60)),
        criterion_2,
    );
    record(
        &mut results,
        "c3 auxiliary bound",
        Some(Duration::from_secs(120)),
        criterion_3,
    );
    record(&mut results, "c4 ppca scalar posterior", None, criterion_4);
    record(&mut results, "c5 residuals", None, criterion_5);
    record(
        &mut results,
        "c6 desk sweep",
        Some(Duration::from_secs(900)),
        criterion_6,
    );
    record(
        &mut results,
        "c7 trend in T",
        Some(Duration::from_secs(600)),
        criterion_7,
    );
    record(&mut results, "c8 alpha selection", None, criterion_8);
    record(&mut results, "c9 sweep determinism", None, criterion_9);
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, p)| !p)
        .map(|(n, _)| n.as_str())
        .collect();
    if failed.is_empty() {
        println!("acceptance: all run criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
