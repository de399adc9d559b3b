//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use triview::config::train_logistic;
use triview::core::data::{
    compose_patchwork, gen_hmm_sequences, gen_multiview, synthetic_digits, EmissionSpec, HmmSpec, MultiviewConfig,
    PatchworkConfig,
};
use triview::core::decomposition::{amplify_estimates, amplify_scalars, decompose_moments, DecompConfig, PlugInEstimate};
use triview::core::hmm::{forward_backward, hmm_risk, labeled_inner_risk, Emission, HmmModel, HmmRiskConfig};
use triview::core::learning::{
    constrained_minimizer, estimate_mean_features, gradient_moments_from_estimate, labeled_mean_features,
    learn_logistic, phi_from_parts, Alignment, LearnConfig,
};
use triview::core::linalg::log_sum_exp;
use triview::core::matching::{align_columns, assignment_value, best_assignment, brute_force_assignment};
use triview::core::models::{separate_offsets, ViewLossModel};
use triview::core::moments::{accumulate_moments, ExtendedLosses, LossSource, PopulationModel, ScaleConstants};
use triview::core::risk::{estimate_exponential_risk, estimate_risk, labeled_risk};
use triview::core::sample::{LabeledData, ViewData};
use triview::core::Error;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn random_population(rng: &mut ChaCha8Rng, k: usize) -> PopulationModel {
    loop {
        let mats: [DMatrix<f64>; 3] = std::array::from_fn(|_| {
            DMatrix::from_fn(k, k, |r, c| if r == c { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
        });
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..2.0)).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let sigma_ok = mats.iter().all(|m| m.clone().svd(false, false).singular_values.min() >= 0.3);
        if sigma_ok && pi.iter().all(|&p| p >= 0.15) {
            return PopulationModel::new(mats, pi).unwrap();
        }
    }
}

fn recovery_error(truth: &PopulationModel, est: &PlugInEstimate) -> f64 {
    let perm = align_columns(&truth.mats, &est.m).unwrap();
    let est = est.permuted(&perm);
    let mut err: f64 = 0.0;
    for v in 0..3 {
        err = err.max(max_abs(&truth.mats[v], &est.m[v]));
    }
    truth.pi.iter().zip(&est.pi).fold(err, |e, (a, b)| e.max((a - b).abs()))
}

fn exact_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_raw, mut worst_refined): (f64, f64) = (0.0, 0.0);
    for i in 0..50 {
        let k = 2 + i % 3;
        let pop = random_population(&mut rng, k);
        let moments = pop.moments(1, 64);
        let raw_cfg = DecompConfig {
            refine: false,
            seed: i as u64,
            ..DecompConfig::default()
        };
        let cfg = DecompConfig {
            seed: i as u64,
            ..DecompConfig::default()
        };
        let raw = decompose_moments(&moments, Some(&pop), k, &raw_cfg).map_err(|e| format!("instance {i}: {e}"))?;
        let refined = decompose_moments(&moments, Some(&pop), k, &cfg).map_err(|e| format!("instance {i}: {e}"))?;
        worst_raw = worst_raw.max(recovery_error(&pop, &raw));
        worst_refined = worst_refined.max(recovery_error(&pop, &refined));
    }
    check(
        worst_raw <= 1e-3 && worst_refined <= 1e-6,
        format!("max error {worst_raw:.2e} before refinement, {worst_refined:.2e} after"),
    )
}

fn multiview_config(k: usize, dims: [usize; 3]) -> MultiviewConfig {
    let mut c = MultiviewConfig::new(k, dims);
    c.pi = match k {
        2 => vec![0.4, 0.6],
        _ => vec![0.25, 0.35, 0.4],
    };
    c
}

fn sampled_risk() -> Outcome {
    let c = multiview_config(3, [10, 10, 10]);
    let train = gen_multiview(&c, 5000, 1_000_000).unwrap();
    let model = train_logistic(&train, 10.0, 1e-8, 500).map_err(|e| e.to_string())?;
    let errors = |m: usize| -> Result<Vec<(f64, f64)>, String> {
        (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let data = gen_multiview(&c, m, seed).unwrap();
                let truth = labeled_risk(&data, &model).unwrap();
                let est = estimate_risk(data.unlabeled(), &model, &DecompConfig::default())
                    .map_err(|e| format!("m {m} seed {seed}: {e}"))?;
                Ok(((est.value - truth).abs(), truth))
            })
            .collect()
    };
    let main = errors(10_000)?;
    let hits = main.iter().filter(|(e, r)| *e <= 0.05 * (1.0 + r.abs())).count();
    let small = median(errors(2_500)?.iter().map(|x| x.0).collect());
    let large = median(errors(40_000)?.iter().map(|x| x.0).collect());
    check(
        hits >= 8 && large < small,
        format!("{hits}/10 within tolerance; median error {small:.3e} at m=2500, {large:.3e} at m=40000"),
    )
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for i in 0..1000 {
        let k = 1 + i % 7;
        let ints = i % 2 == 1;
        let x = DMatrix::from_fn(k, k, |_, _| {
            if ints {
                rng.random_range(-3..4) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        });
        let fast = best_assignment(&x).map_err(|e| e.to_string())?;
        let slow = brute_force_assignment(&x);
        let (a, b) = (assignment_value(&x, &fast.sigma), assignment_value(&x, &slow.sigma));
        if a != b {
            return Err(format!("instance {i} (k = {k}): {a} vs {b}"));
        }
    }
    Ok("1000 instances, identical objectives".into())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn perturbed_features() -> Outcome {
    let c = multiview_config(3, [4, 4, 4]);
    let data = gen_multiview(&c, 1000, 404).unwrap();
    let (_, d) = separate_offsets(3, c.dims);
    let model = ViewLossModel::logistic(3, c.dims, vec![0.0; d]).unwrap();
    let rho = 10.0;
    let phi = labeled_mean_features(&data, &model).unwrap();
    let best = constrained_minimizer(data.unlabeled(), &model, &phi, rho, 1e-10, 500).map_err(|e| e.to_string())?;
    let mut worst = f64::NEG_INFINITY;
    for eps in [0.01, 0.1] {
        let slacks: Vec<f64> = (0..100u64)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(trial + (eps * 1000.0) as u64 * 1000);
                let mut delta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = norm(&delta);
                delta.iter_mut().for_each(|x| *x *= eps / n);
                let noisy: Vec<f64> = phi.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let out = constrained_minimizer(data.unlabeled(), &model, &noisy, rho, 1e-10, 500).unwrap();
                let risk = labeled_risk(&data, &model.with_theta(out.theta).unwrap()).unwrap();
                risk - (best.objective + 2.0 * eps * rho + 1e-6)
            })
            .collect();
        worst = slacks.into_iter().fold(worst, f64::max);
    }
    check(worst <= 0.0, format!("200 perturbations, worst slack {worst:.3e}"))
}

fn sticky_chain() -> HmmSpec {
    HmmSpec {
        k: 2,
        t_len: 6,
        initial: vec![0.6, 0.4],
        transition: vec![vec![0.9, 0.1], vec![0.15, 0.85]],
        emission: EmissionSpec::Categorical {
            probs: vec![vec![0.8, 0.15, 0.05], vec![0.1, 0.2, 0.7]],
        },
    }
}

fn enumeration_error(model: &HmmModel, x: &[f64]) -> f64 {
    let k = model.k;
    let big_t = x.len();
    let table = forward_backward(model, x).unwrap();
    let paths: Vec<Vec<usize>> = (0..k.pow(big_t as u32))
        .map(|mut c| {
            (0..big_t)
                .map(|_| {
                    let y = c % k;
                    c /= k;
                    y
                })
                .collect()
        })
        .collect();
    let logs: Vec<f64> = paths.iter().map(|p| model.path_log_potential(x, p).unwrap()).collect();
    let z = log_sum_exp(&logs);
    let mut unary = vec![vec![0.0; k]; big_t];
    let mut pair = vec![DMatrix::<f64>::zeros(k, k); big_t];
    for (p, lp) in paths.iter().zip(&logs) {
        let w = (lp - z).exp();
        for t in 0..big_t {
            unary[t][p[t]] += w;
            if t > 0 {
                pair[t][(p[t - 1], p[t])] += w;
            }
        }
    }
    let mut err: f64 = 0.0;
    for t in 0..big_t {
        for j in 0..k {
            err = err.max((table.unary[t][j] - unary[t][j]).abs());
        }
        if t > 0 {
            err = err.max(max_abs(&table.pairwise[t], &pair[t]));
        }
    }
    err
}

fn random_hmm(rng: &mut ChaCha8Rng, k: usize, symbols: usize) -> HmmModel {
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-2.0..1.0)).collect::<Vec<f64>>();
    let init = draw(k);
    let trans = (0..k).map(|_| draw(k)).collect();
    let emis = (0..k).map(|_| draw(symbols)).collect();
    HmmModel::new(init, trans, Emission::Categorical { log_probs: emis }).unwrap()
}

fn hmm_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for k in 1..=3 {
        for big_t in 1..=6 {
            for _ in 0..3 {
                let model = random_hmm(&mut rng, k, 4);
                let x: Vec<f64> = (0..big_t).map(|_| rng.random_range(0..4) as f64).collect();
                worst = worst.max(enumeration_error(&model, &x));
            }
        }
    }
    let spec = sticky_chain();
    let model = HmmModel::from_spec(&spec).unwrap();
    let gaps: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let data = gen_hmm_sequences(&spec, 5000, seed).unwrap();
            let truth = labeled_inner_risk(&model, &data).unwrap();
            hmm_risk(&model, &data.data, &HmmRiskConfig::default())
                .map(|r| (r.value - truth).abs())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let far = gaps.iter().cloned().fold(0.0, f64::max);
    check(
        worst <= 1e-10 && far <= 0.1,
        format!("enumeration error {worst:.2e}; worst inner-risk gap {far:.3} over 10 seeds"),
    )
}

fn mean_model(c: &MultiviewConfig) -> ViewLossModel {
    let means = c.class_means();
    let theta = (0..3).flat_map(|v| means[v].iter().flatten().copied()).collect();
    ViewLossModel::logistic(c.k, c.dims, theta).unwrap()
}

/// `φ̄` for a linear model: block `(v, i)` holds `π_i μ_{v,i}`.
fn population_phi(c: &MultiviewConfig) -> Vec<f64> {
    let means = c.class_means();
    let mut phi = Vec::new();
    for view in &means {
        for (i, mu) in view.iter().enumerate() {
            phi.extend(mu.iter().map(|x| c.pi[i] * x));
        }
    }
    phi
}

fn gradient_moments() -> Outcome {
    let mut worst_g: f64 = 0.0;
    let mut worst_phi: f64 = 0.0;
    for k in [2, 3] {
        let mut c = multiview_config(k, [4, 4, 4]);
        c.mean_scale = 1.5;
        c.noise = 0.5;
        let seed = mean_model(&c);
        let (offsets, d) = separate_offsets(k, c.dims);
        let mut rng = ChaCha8Rng::seed_from_u64(606 + k as u64);
        let query = ViewLossModel::logistic(k, c.dims, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let means = c.class_means();
        // the losses and gradients are linear in x, so class means give the population moments
        let views: [Vec<f64>; 3] = std::array::from_fn(|v| means[v].iter().flatten().copied().collect());
        let at_means = ViewData::new(c.dims, views).unwrap();
        let scale = ScaleConstants { tau: 1.0, b: 2.0 };
        let layout = ExtendedLosses::new(&seed, &query, &at_means, &scale, false).unwrap();
        let dims = layout.dims();
        let mats: [DMatrix<f64>; 3] = std::array::from_fn(|v| {
            let mut m = DMatrix::zeros(dims[v], k);
            for j in 0..k {
                let mut col = vec![0.0; dims[v]];
                layout.fill(j, v, &mut col).unwrap();
                m.set_column(j, &DVector::from_vec(col));
            }
            m
        });
        let pop = PopulationModel::new(mats, c.pi.clone()).unwrap();
        let est = decompose_moments(&pop.moments(1, 64), Some(&pop), k, &DecompConfig::default())
            .map_err(|e| format!("k {k}: {e}"))?;
        let gm = gradient_moments_from_estimate(&est, &layout, scale, false, Alignment::Match)
            .map_err(|e| format!("k {k}: {e}"))?;
        for v in 0..3 {
            for idx in 0..d {
                for i in 0..k {
                    for j in 0..k {
                        let block = offsets[v] + i * c.dims[v];
                        let want = if (block..block + c.dims[v]).contains(&idx) {
                            means[v][j][idx - block]
                        } else {
                            0.0
                        };
                        worst_g = worst_g.max((gm.g[v][(i + k * idx, j)] - want).abs());
                    }
                }
            }
        }
        let phi = population_phi(&c);
        worst_phi = gm.phi_hat.iter().zip(&phi).fold(worst_phi, |w, (a, b)| w.max((a - b).abs()));
    }
    let mut c = multiview_config(3, [4, 4, 4]);
    c.mean_scale = 1.5;
    c.noise = 0.5;
    let seed = mean_model(&c);
    let phi = population_phi(&c);
    let errors = |m: usize| -> Result<Vec<f64>, String> {
        (0..10u64)
            .into_par_iter()
            .map(|s| {
                let data = gen_multiview(&c, m, s).unwrap();
                let gm = estimate_mean_features(
                    data.unlabeled(),
                    &seed,
                    &seed,
                    &DecompConfig::default(),
                    false,
                    Alignment::Match,
                )
                .map_err(|e| format!("m {m} seed {s}: {e}"))?;
                Ok(gm.phi_hat.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            })
            .collect()
    };
    let small = median(errors(2_500)?);
    let large = median(errors(40_000)?);
    check(
        worst_g <= 1e-5 && worst_phi <= 1e-5 && large < small,
        format!(
            "exact G error {worst_g:.2e}, phi error {worst_phi:.2e}; median sampled error {small:.3e} at m=2500, {large:.3e} at m=40000"
        ),
    )
}

/// Standard error of `R̂ − labeled mean` by delete-a-group jackknife over 10 contiguous groups.
fn jackknife_se(data: &ViewData, losses: &[f64], model: &ViewLossModel) -> Result<f64, String> {
    let (m, groups) = (losses.len(), 10);
    let diffs = (0..groups)
        .map(|g| {
            let (a, b) = (g * m / groups, (g + 1) * m / groups);
            let rest = data.slice(0..a).concat(&data.slice(b..m)).unwrap();
            let est = estimate_exponential_risk(&rest, model, &DecompConfig::default()).map_err(|e| e.to_string())?;
            let mc = (losses[..a].iter().sum::<f64>() + losses[b..].iter().sum::<f64>()) / (m - (b - a)) as f64;
            Ok(est.value - mc)
        })
        .collect::<Result<Vec<f64>, String>>()?;
    let mean = diffs.iter().sum::<f64>() / groups as f64;
    let ss = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>();
    Ok(((groups as f64 - 1.0) / groups as f64 * ss).sqrt())
}

fn exponential_loss() -> Outcome {
    let mut c = multiview_config(3, [4, 4, 4]);
    c.noise = 0.5;
    let means = c.class_means();
    let theta = (0..3).flat_map(|v| means[v].iter().flatten().map(|x| 0.4 * x)).collect();
    let model = ViewLossModel::logistic(3, c.dims, theta).unwrap();
    let rows = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let data = gen_multiview(&c, 20_000, seed).unwrap();
            let losses: Vec<f64> = data
                .labels()
                .iter()
                .enumerate()
                .map(|(n, &y)| {
                    let x = data.unlabeled().sample(n);
                    (0..3).map(|v| (-model.loss_vector(v, x[v]).unwrap().values[y]).exp()).product()
                })
                .collect();
            let m = losses.len() as f64;
            let mean = losses.iter().sum::<f64>() / m;
            let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let est = estimate_exponential_risk(data.unlabeled(), &model, &DecompConfig::default())
                .map_err(|e| format!("seed {seed}: {e}"))?;
            let se = jackknife_se(data.unlabeled(), &losses, &model).map_err(|e| format!("seed {seed}: {e}"))?;
            Ok((est.value - mean, se, (var / m).sqrt()))
        })
        .collect::<Result<Vec<(f64, f64, f64)>, String>>()?;
    let hits = rows.iter().filter(|(d, se, _)| d.abs() <= 3.0 * se).count();
    let worst = rows.iter().map(|(d, se, _)| d.abs() / se).fold(0.0, f64::max);
    let mc_only = rows.iter().filter(|(d, _, mc)| d.abs() <= 3.0 * mc).count();
    check(
        hits == 10,
        format!("{hits}/10 seeds within 3 SE of the labeled mean, worst {worst:.2} SE; {mc_only}/10 against the labeled-mean SE alone"),
    )
}

fn adaptation() -> Outcome {
    let images = synthetic_digits(3, 40, 6, 7).unwrap();
    let patch = |a: f64, m: usize, seed: u64| -> LabeledData {
        let cfg = PatchworkConfig {
            shift: a,
            convention: Default::default(),
            pi: None,
        };
        compose_patchwork(&images, &cfg, m, seed).unwrap()
    };
    let seed_model = train_logistic(&patch(0.0, 5000, 1_000_000), 10.0, 1e-8, 500).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut wins_at_five = 0;
    for a in [0.0, 2.5, 5.0] {
        let rows: Vec<Result<(f64, f64), String>> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let data = patch(a, 10_000, seed);
                let test = patch(a, 5_000, seed + 2_000_000);
                let out = learn_logistic(data.unlabeled(), &seed_model, &LearnConfig::default())
                    .map_err(|e| format!("a {a} seed {seed}: {e}"))?;
                let learned = seed_model.with_theta(out.solve.theta).unwrap();
                Ok((labeled_risk(&test, &seed_model).unwrap(), labeled_risk(&test, &learned).unwrap()))
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
        let wins = rows.iter().filter(|(s, l)| l < s).count();
        let seed_med = median(rows.iter().map(|r| r.0).collect());
        let learned_med = median(rows.iter().map(|r| r.1).collect());
        detail.push(format!("a={a}: adapted wins {wins}/10 (median {learned_med:.4} vs {seed_med:.4})"));
        if a == 5.0 {
            wins_at_five = wins;
        }
    }
    check(wins_at_five >= 8, detail.join("; "))
}

fn amplification() -> Outcome {
    let three = amplify_scalars(&[5.0, 0.0, 0.01], 0.05).map_err(|e| e.to_string())?;
    let mut nine = vec![1.0, 1.0, 1.0, 1.0];
    nine.extend([0.0, 0.002, 0.004, 0.007, 0.01]);
    let from_nine = amplify_scalars(&nine, 0.05).map_err(|e| e.to_string())?;
    let outliers = amplify_scalars(&[0.0, 10.0, 20.0], 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let pop = random_population(&mut rng, 3);
    let good = decompose_moments(&pop.moments(1, 64), Some(&pop), 3, &DecompConfig::default()).unwrap();
    let mut bad = good.clone();
    bad.m[0] *= 10.0;
    let picked = amplify_estimates(&[bad, good.permuted(&[2, 0, 1]), good], Some(1e-6));
    check(
        three == 0.0
            && from_nine <= 0.01
            && matches!(outliers, Err(Error::AmplificationFailed))
            && matches!(picked, Ok(1)),
        format!("3-case {three}, 9-case {from_nine}, all-outlier {outliers:?}, estimates {picked:?}"),
    )
}

fn random_model(rng: &mut ChaCha8Rng) -> ViewLossModel {
    let k = rng.random_range(2..=5);
    let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let (_, d) = separate_offsets(k, dims);
    let scale = rng.random_range(0.1..20.0);
    ViewLossModel::logistic(k, dims, (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_views(rng: &mut ChaCha8Rng, dims: [usize; 3], m: usize) -> ViewData {
    ViewData::new(dims, std::array::from_fn(|v| (0..m * dims[v]).map(|_| rng.random_range(-2.0..2.0)).collect())).unwrap()
}

struct Table {
    dims: [usize; 3],
    rows: Vec<[Vec<f64>; 3]>,
}

impl LossSource for Table {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn dims(&self) -> [usize; 3] {
        self.dims
    }
    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> triview::core::Result<()> {
        out.copy_from_slice(&self.rows[n][v]);
        Ok(())
    }
}

fn structural() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst = [0.0f64; 5];
    for _ in 0..1000 {
        // additive identity and normalization against a direct score computation
        let model = random_model(&mut rng);
        let (k, dims) = (model.k(), model.view_dims());
        let offsets = model.view_offsets();
        let data = random_views(&mut rng, dims, 1);
        let x = data.sample(0);
        let theta = model.theta();
        let scores: Vec<f64> = (0..k)
            .map(|i| {
                (0..3)
                    .map(|v| (0..dims[v]).map(|r| theta[offsets[v] + i * dims[v] + r] * x[v][r]).sum::<f64>())
                    .sum()
            })
            .collect();
        let zmax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let base = zmax + scores.iter().map(|s| (s - zmax).exp()).sum::<f64>().ln();
        let scale = 1.0 + base.abs() + zmax.abs();
        let mut mass = 0.0;
        for y in 0..k {
            let loss = model.loss(x, y).unwrap();
            let split = model.base_term(x).unwrap() - (0..3).map(|v| model.loss_vector(v, x[v]).unwrap().values[y]).sum::<f64>();
            worst[0] = worst[0].max((loss - (base - scores[y])).abs() / scale).max((loss - split).abs() / scale);
            mass += (-loss).exp();
        }
        worst[1] = worst[1].max((mass - 1.0).abs());

        // pair moments against direct outer products, and population pairs against M_v diag(π) M_wᵀ
        let m = rng.random_range(1..6);
        let table = Table {
            dims,
            rows: (0..m)
                .map(|_| std::array::from_fn(|v| (0..dims[v]).map(|_| rng.random_range(-3.0..3.0)).collect()))
                .collect(),
        };
        let moments = accumulate_moments(&table, 8).unwrap();
        for v in 0..3 {
            for w in 0..3 {
                if v == w {
                    continue;
                }
                let mut direct = DMatrix::zeros(dims[v], dims[w]);
                for row in &table.rows {
                    direct += DVector::from_column_slice(&row[v]) * DVector::from_column_slice(&row[w]).transpose();
                }
                direct /= m as f64;
                let got = moments.pair(v, w);
                worst[2] = worst[2].max(max_abs(&got, &direct)).max(max_abs(&got, &moments.pair(w, v).transpose()));
            }
        }
        let kk = rng.random_range(2..=4);
        let mats: [DMatrix<f64>; 3] = std::array::from_fn(|_| DMatrix::from_fn(kk, kk, |_, _| rng.random_range(-2.0..2.0)));
        let raw: Vec<f64> = (0..kk).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|p| p / s).collect();
        let pop = PopulationModel::new(mats.clone(), pi.clone()).unwrap();
        let pm = pop.moments(1, 8);
        let dpi = DMatrix::from_diagonal(&DVector::from_vec(pi));
        for (v, w) in [(0, 1), (1, 2), (0, 2), (2, 0)] {
            worst[2] = worst[2].max(max_abs(&pm.pair(v, w), &(&mats[v] * &dpi * mats[w].transpose())));
        }

        // posterior marginalization
        let hk = rng.random_range(1..=3);
        let hmm = random_hmm(&mut rng, hk, 5);
        let big_t = rng.random_range(1..8);
        let obs: Vec<f64> = (0..big_t).map(|_| rng.random_range(0..5) as f64).collect();
        let fb = forward_backward(&hmm, &obs).unwrap();
        for t in 0..big_t {
            worst[3] = worst[3].max((fb.unary[t].iter().sum::<f64>() - 1.0).abs());
            if t > 0 {
                for j in 0..hk {
                    worst[3] = worst[3]
                        .max((fb.pairwise[t].column(j).sum() - fb.unary[t][j]).abs())
                        .max((fb.pairwise[t].row(j).sum() - fb.unary[t - 1][j]).abs());
                }
            }
        }

        // φ̂ from class-conditional gradient means equals the labeled mean feature
        let n = rng.random_range(k..k + 20);
        let views = random_views(&mut rng, dims, n);
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let labeled = LabeledData::new(views, labels.clone(), k).unwrap();
        let d = model.d();
        let counts: Vec<f64> = (0..k).map(|j| labels.iter().filter(|&&y| y == j).count() as f64).collect();
        let g: [DMatrix<f64>; 3] = std::array::from_fn(|v| {
            let mut gv = DMatrix::zeros(d * k, k);
            for (s, &y) in labels.iter().enumerate() {
                let grad = model.grad_loss_vector(v, labeled.unlabeled().sample(s)[v]).unwrap();
                for i in 0..k {
                    for r in 0..d {
                        gv[(i + k * r, y)] += grad[(i, r)] / counts[y];
                    }
                }
            }
            gv
        });
        let prior: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
        let phi = labeled_mean_features(&labeled, &model).unwrap();
        let rebuilt = phi_from_parts(&g, &prior);
        let size = 1.0 + phi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        worst[4] = rebuilt.iter().zip(&phi).fold(worst[4], |w, (a, b)| w.max((a - b).abs() / size));
    }
    let limits = [1e-12, 1e-12, 1e-12, 1e-12, 1e-12];
    check(
        worst.iter().zip(&limits).all(|(w, l)| w <= l),
        format!(
            "1000 instances; additive {:.1e}, normalization {:.1e}, pairs {:.1e}, marginals {:.1e}, phi {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("exact-moment recovery", 10, exact_recovery),
        ("sampled risk estimation", 60, sampled_risk),
        ("matching oracle", 5, matching_oracle),
        ("robustness to perturbed mean features", 30, perturbed_features),
        ("hmm inference and risk", 120, hmm_checks),
        ("gradient moments", 60, gradient_moments),
        ("exponential-loss risk", 20, exponential_loss),
        ("domain-adaptation trend", 600, adaptation),
        ("amplification", 1, amplification),
        ("structural identities", 30, structural),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let (ok, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<40} {} ({}; {:.1} s of {} s)",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            detail,
            elapsed.as_secs_f64(),
            limit
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
