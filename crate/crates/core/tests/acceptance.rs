//! Acceptance suite. Every test prints one `PASS` or `FAIL` line for its
//! criterion and then asserts it.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use sharedrep::complexity::{
    binary_entropy, entropy, f_breakpoint, kl_gibbs_bound_check, f_inverse_half_delta, f_of, fannes_bound, kl_divergence, lambert_w_minus1, n_maxmin, n_sr,
    tv_distance, ComplexityInputs, GapProfile, Regime, BRANCH_POINT,
};
use sharedrep::data::{compute_covariances, sample_dataset, PreferenceDataset, PreferenceRecord};
use sharedrep::estimation::{bce_gradients, bce_loss, fit_sharedrep, param_error, ConfidenceSpec, SharedRepParams};
use sharedrep::harness::{emit, median, sweep, Method, ScenarioConfig, TrialResult, AGREEMENT_GAP};
use sharedrep::policy::{
    gibbs_policy, kl_value, pessimistic_value, solve_maxmin_policy, worst_group_by_entropy, worst_group_by_reward,
    MaxMinProblem, PolicyTable, RewardTable, SolverOptions,
};
use sharedrep::rng::{stream_rng, Stream};
use sharedrep::world::{build_world, FeatureMap, PromptDistribution};

fn report(id: u32, name: &str, pass: bool, detail: &str, started: Instant) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict} criterion {id} ({name}): {detail} [{:.1}s]", started.elapsed().as_secs_f64());
    pass
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_policy(rng: &mut impl Rng, nx: usize, ny: usize) -> PolicyTable {
    let rows: Vec<Vec<f64>> = (0..nx).map(|_| random_distribution(rng, ny)).collect();
    PolicyTable::from_rows(&rows).unwrap()
}

fn random_rewards(rng: &mut impl Rng, nx: usize, ny: usize, scale: f64) -> RewardTable {
    RewardTable::from_fn(nx, ny, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Least-squares slope of `ln y` against `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Spearman rank correlation without tie correction.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn criterion_1_worst_group_rules_agree() {
    let started = Instant::now();
    let mut rng = stream_rng(101, Stream::Instance, 0);
    let solver = SolverOptions::default();
    let (mut certified, mut agree, mut drawn) = (0, 0, 0);
    let mut first_disagreement = None;
    while certified < 200 {
        drawn += 1;
        assert!(drawn < 5000, "too few certified instances");
        let groups = rng.random_range(2..=4);
        let nx = rng.random_range(1..=6);
        let ny = rng.random_range(2..=5);
        let beta = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let rewards: Vec<RewardTable> = (0..groups).map(|_| random_rewards(&mut rng, nx, ny, 1.0)).collect();
        let reference = random_policy(&mut rng, nx, ny);
        let rho = PromptDistribution::new(random_distribution(&mut rng, nx)).unwrap();
        let solution = solve_maxmin_policy(
            MaxMinProblem {
                rewards: &rewards,
                reference: &reference,
                rho: &rho,
                beta,
                penalty: None,
            },
            &solver,
        )
        .unwrap();
        if solution.duality_gap > AGREEMENT_GAP {
            continue;
        }
        let by_reward = worst_group_by_reward(&solution.policy, &rewards, &rho).unwrap();
        let gibbs: Vec<PolicyTable> = rewards.iter().map(|r| gibbs_policy(r, &reference, beta).unwrap()).collect();
        let by_entropy = worst_group_by_entropy(&gibbs, &rho).unwrap();
        if by_reward.tie || by_entropy.tie {
            continue;
        }
        certified += 1;
        if by_reward.chosen == by_entropy.chosen {
            agree += 1;
        } else if first_disagreement.is_none() {
            first_disagreement = Some(format!(
                "first disagreement: U={groups} |X|={nx} |Y|={ny} beta={beta} reward rule {} entropy rule {}",
                by_reward.chosen, by_entropy.chosen
            ));
        }
    }
    let pass = agree == certified;
    let detail = format!(
        "{agree}/{certified} certified instances agree ({drawn} drawn){}",
        first_disagreement.map(|s| format!("; {s}")).unwrap_or_default()
    );
    assert!(report(1, "worst-group rules", pass, &detail, started));
}

struct ConcentrationRun {
    n: usize,
    param_error: Vec<f64>,
    measured_kl: Vec<f64>,
    kl_bound: Vec<f64>,
}

/// Shared-representation fits for `N = 2⁸ … 2¹⁴`, `λ = 1/N` and 20 seeds.
fn concentration_runs(scenario: &ScenarioConfig) -> Vec<ConcentrationRun> {
    let sizes: Vec<usize> = (8..=14).map(|e| 1usize << e).collect();
    let mut runs = Vec::new();
    for n in sizes {
        for seed in 0..20u64 {
            let world = build_world(&scenario.world_for_seed(seed)).unwrap();
            let ds = sample_dataset(&world, n, &world.config.group_proportions, &scenario.sampling, seed).unwrap();
            let lambda = 1.0 / n as f64;
            let metric = compute_covariances(&ds, lambda).pooled_metric().unwrap();
            let spec = ConfidenceSpec::new(world.features.dim(), lambda, scenario.delta, world.config.b_max, world.config.l_max).unwrap();
            let opts = sharedrep::estimation::FitOptions {
                seed,
                ..scenario.fit.clone()
            };
            let (params, _) = fit_sharedrep(&ds, world.config.shared_dim, world.config.b_max, &opts).unwrap();
            let mut run = ConcentrationRun {
                n,
                param_error: Vec::new(),
                measured_kl: Vec::new(),
                kl_bound: Vec::new(),
            };
            for u in 0..world.num_groups() {
                let theta = params.theta_of(u);
                run.param_error.push(param_error(&theta, &world.truth.theta(u), &metric));
                let check = kl_gibbs_bound_check(&world, &theta, &metric, &spec, n, scenario.beta, u).unwrap();
                run.measured_kl.push(check.measured_kl);
                run.kl_bound.push(check.bound_leading_term);
            }
            runs.push(run);
        }
    }
    runs
}

fn per_group_slopes(runs: &[ConcentrationRun], pick: impl Fn(&ConcentrationRun) -> &Vec<f64>) -> Vec<f64> {
    let groups = pick(&runs[0]).len();
    let mut sizes: Vec<usize> = runs.iter().map(|r| r.n).collect();
    sizes.dedup();
    (0..groups)
        .map(|u| {
            let points: Vec<(f64, f64)> = sizes
                .iter()
                .map(|&n| {
                    let mut v: Vec<f64> = runs.iter().filter(|r| r.n == n).map(|r| pick(r)[u]).collect();
                    (n as f64, median(&mut v))
                })
                .collect();
            loglog_slope(&points)
        })
        .collect()
}

#[test]
fn criterion_2_concentration_slope() {
    let started = Instant::now();
    let scenario = ScenarioConfig::concentration();
    let runs = concentration_runs(&scenario);
    let slopes = per_group_slopes(&runs, |r| &r.param_error);
    let pass = slopes.iter().all(|s| (-0.65..=-0.35).contains(s));
    let detail = format!(
        "median error slopes per group {slopes:.3?} (b_max = {}), target [-0.65, -0.35]",
        scenario.world.b_max
    );
    assert!(report(2, "concentration slope", pass, &detail, started));
}

#[test]
fn criterion_7_divergence_trend() {
    let started = Instant::now();
    let runs = concentration_runs(&ScenarioConfig::default());
    let kl_slopes = per_group_slopes(&runs, |r| &r.measured_kl);
    let mut worst_excess = f64::NEG_INFINITY;
    for r in runs.iter().filter(|r| r.n >= 1 << 12) {
        for (m, b) in r.measured_kl.iter().zip(&r.kl_bound) {
            worst_excess = worst_excess.max(m - b);
        }
    }
    let pass7 = kl_slopes.iter().all(|s| *s < 0.0) && worst_excess <= 0.1;
    let detail = format!("median KL slopes per group {kl_slopes:.3?}; largest KL minus bound for N >= 4096: {worst_excess:.3e} (limit 0.1)");
    assert!(report(7, "divergence trend", pass7, &detail, started));
}

#[test]
fn criterion_3_minority_share_trend() {
    let started = Instant::now();
    let scenario = ScenarioConfig::minority_trend();
    assert_eq!(scenario.seeds.len(), 50);
    assert_eq!((scenario.world.feature_dim, scenario.world.shared_dim, scenario.n_grid.as_slice()), (16, 3, &[4096][..]));
    let outcome = sweep(&scenario, None).unwrap();
    assert!(outcome.errors.is_empty(), "{:?}", outcome.errors);
    let minority = |t: &TrialResult, m: Method| t.method(m).unwrap().groups[t.minority_group].clone();

    let mut pass = true;
    let mut lines = Vec::new();
    let mut mm_medians = Vec::new();
    let mut policy_info = Vec::new();
    for &p in &scenario.minority_grid {
        let cell: Vec<&TrialResult> = outcome.results.iter().filter(|t| t.minority_prop == p).collect();
        let wins = cell
            .iter()
            .filter(|t| minority(t, Method::Sharedrep).best_response_subopt <= minority(t, Method::Maxmin).best_response_subopt)
            .count();
        let rate = wins as f64 / cell.len() as f64;
        if p <= 0.05 {
            pass &= rate >= 0.8;
        }
        lines.push(format!("p={p}: {wins}/{}", cell.len()));
        // The gold policy for a single group is the true greedy response, whose
        // suboptimality is zero, so the gap to gold is the suboptimality itself.
        let mut gaps: Vec<f64> = cell.iter().map(|t| minority(t, Method::Maxmin).best_response_subopt).collect();
        mm_medians.push(median(&mut gaps));
        let policy_wins = cell
            .iter()
            .filter(|t| minority(t, Method::Sharedrep).subopt <= minority(t, Method::Maxmin).subopt)
            .count();
        let mut policy_gaps: Vec<f64> = cell
            .iter()
            .map(|t| minority(t, Method::Maxmin).subopt - minority(t, Method::Gold).subopt)
            .collect();
        policy_info.push(format!("p={p}: {policy_wins}/{} median gap {:.3e}", cell.len(), median(&mut policy_gaps)));
    }
    let trend = -spearman(&scenario.minority_grid, &mm_medians);
    pass &= trend >= 0.8;
    println!("info criterion 3: max-min policies, sharedrep minority subopt <= maxmin: {}", policy_info.join(", "));
    let detail = format!(
        "sharedrep <= maxmin minority subopt {} (need 80% at p <= 0.05); maxmin gap-to-gold medians [{}], decreasing-trend Spearman {trend:.3}",
        lines.join(", "),
        mm_medians.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", ")
    );
    assert!(report(3, "minority share trend", pass, &detail, started));
}

#[test]
fn criterion_4_inequality_suite() {
    let started = Instant::now();
    let mut rng = stream_rng(104, Stream::Instance, 0);
    let slack = 1e-9;
    let (mut fannes, mut pinsker, mut binary, mut pessimism) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let ny = rng.random_range(2..=8);
        let raw_p: Vec<f64> = (0..ny).map(|_| rng.random::<f64>().powi(3)).collect();
        let raw_q: Vec<f64> = (0..ny).map(|_| rng.random::<f64>().powi(3)).collect();
        let (sp, sq) = (raw_p.iter().sum::<f64>(), raw_q.iter().sum::<f64>());
        let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = raw_q.iter().map(|v| v / sq).collect();
        if (entropy(&p) - entropy(&q)).abs() > fannes_bound(&p, &q, ny).unwrap() + slack {
            fannes += 1;
        }
        let tv = tv_distance(&p, &q);
        if kl_divergence(&p, &q) + slack < 2.0 * tv * tv {
            pinsker += 1;
        }
    }
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-12..1.0);
        if binary_entropy(p).unwrap() >= p * (1.0 - p.ln()) + slack {
            binary += 1;
        }
    }
    for _ in 0..1000 {
        let (nx, ny, d) = (rng.random_range(1..=5), rng.random_range(2..=5), rng.random_range(1..=6));
        let rows: Vec<Vec<f64>> = (0..nx * ny).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let max_norm = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let phi = FeatureMap::from_rows(nx, ny, &rows, max_norm.max(1e-12)).unwrap();
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma = &a * a.transpose();
        let metric = sharedrep::data::InverseMetric::new(&sigma, rng.random_range(1e-3..1.0)).unwrap();
        let theta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let rho = PromptDistribution::new(random_distribution(&mut rng, nx)).unwrap();
        let policy = random_policy(&mut rng, nx, ny);
        let eta = rng.random_range(0.0..3.0);
        let r = pessimistic_value(&policy, &theta, &metric, eta, &phi, &rho).unwrap();
        if r.value > r.plug_in + slack {
            pessimism += 1;
        }
    }
    let pass = fannes + pinsker + binary + pessimism == 0;
    let detail = format!(
        "violations over 1000 cases each: Fannes {fannes}, Pinsker {pinsker}, binary entropy {binary}, pessimistic value {pessimism}"
    );
    assert!(report(4, "inequalities", pass, &detail, started));
}

#[test]
fn criterion_5_closed_forms() {
    let started = Instant::now();
    let mut worst_w = 0.0f64;
    for i in 0..100 {
        // Log-spaced distance from the branch point out to x = −1e-300.
        let t = i as f64 / 99.0;
        let x = -(BRANCH_POINT.abs().ln() * (1.0 - t) + (1e-300f64).ln() * t).exp();
        let x = if i == 0 { BRANCH_POINT } else { x };
        let w = lambert_w_minus1(x).unwrap();
        worst_w = worst_w.max(((w * w.exp() - x) / x).abs());
    }
    let y_size = 5;
    let bp = f_breakpoint();
    let below = f_of(bp * (1.0 - 1e-15), y_size).unwrap();
    let at = f_of(bp, y_size).unwrap();
    let continuity = (below - at).abs();

    let c = (y_size as f64).ln() + 2.0;
    let mut worst_round = 0.0f64;
    let mut regimes = [0usize; 2];
    let (lo, hi) = (1e-6f64.ln(), (1.5 * c).ln());
    for i in 0..50 {
        let delta = (lo + (hi - lo) * i as f64 / 49.0).exp();
        match Regime::of(delta, y_size) {
            Regime::LargeGap => regimes[0] += 1,
            Regime::SmallGap => regimes[1] += 1,
        }
        let x = f_inverse_half_delta(delta, y_size).unwrap();
        worst_round = worst_round.max((f_of(x, y_size).unwrap() - delta / 2.0).abs());
    }

    let spec = ConfidenceSpec::new(16, 1e-3, 0.1, 2.0, 1.0).unwrap();
    let gap = |delta: f64| GapProfile {
        delta_u: vec![0.0, delta],
        delta_min: delta,
        u_star: 0,
    };
    let base = gap(0.9 * 2.0 * c);
    let inputs = ComplexityInputs::new(y_size, 1.0, spec, vec![3.0, 7.0], &base, None);
    assert_eq!(inputs.regime, Regime::LargeGap);
    let ratio = n_maxmin(&inputs, &gap(base.delta_min / 2.0)).unwrap() / n_maxmin(&inputs, &base).unwrap();
    let fourth = (ratio / 16.0 - 1.0).abs();
    let small = ComplexityInputs {
        psi_u: vec![1e-12],
        ..inputs.clone()
    };
    let eps_ratio = n_sr(&small, &base, 0.7, 0.05).unwrap().n_sr / n_sr(&small, &base, 0.7, 0.1).unwrap().n_sr;
    let inverse_square = (eps_ratio / 4.0 - 1.0).abs();

    let pass = worst_w <= 1e-12 && continuity <= 1e-12 && worst_round <= 1e-9 && regimes.iter().all(|&k| k > 0) && fourth <= 1e-9 && inverse_square <= 1e-9;
    let detail = format!(
        "W residual {worst_w:.2e}; f jump at breakpoint {continuity:.2e}; f(f_inv(d)) - d/2 {worst_round:.2e} over {} large / {} small gaps; fourth-power law {fourth:.2e}; inverse-square law {inverse_square:.2e}",
        regimes[0], regimes[1]
    );
    assert!(report(5, "closed forms", pass, &detail, started));
}

fn random_dataset(rng: &mut impl Rng, nx: usize, ny: usize, d: usize, groups: usize, n: usize) -> (FeatureMap, PreferenceDataset) {
    let rows: Vec<Vec<f64>> = (0..nx * ny).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect()).collect();
    let phi = FeatureMap::from_rows(nx, ny, &rows, 10.0).unwrap();
    let records = (0..n)
        .map(|_| {
            let first = rng.random_range(0..ny);
            let second = (first + rng.random_range(1..ny)) % ny;
            PreferenceRecord {
                prompt: rng.random_range(0..nx),
                first,
                second,
                label: rng.random_range(0..=1),
                group: rng.random_range(0..groups),
            }
        })
        .collect();
    let ds = PreferenceDataset::from_records(records, &phi, groups).unwrap();
    (phi, ds)
}

#[test]
fn criterion_6_solver_and_gradients() {
    let started = Instant::now();
    let mut rng = stream_rng(106, Stream::Instance, 0);
    let solver = SolverOptions::default();

    let mut worst_tv = 0.0f64;
    for _ in 0..50 {
        let (nx, ny) = (rng.random_range(1..=6), rng.random_range(2..=6));
        let beta = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let rewards = vec![random_rewards(&mut rng, nx, ny, 2.0)];
        let reference = random_policy(&mut rng, nx, ny);
        let rho = PromptDistribution::new(random_distribution(&mut rng, nx)).unwrap();
        let solution = solve_maxmin_policy(
            MaxMinProblem {
                rewards: &rewards,
                reference: &reference,
                rho: &rho,
                beta,
                penalty: None,
            },
            &solver,
        )
        .unwrap();
        let gibbs = gibbs_policy(&rewards[0], &reference, beta).unwrap();
        worst_tv = worst_tv.max(solution.policy.max_row_tv(&gibbs));
    }

    let mut worst_value = 0.0f64;
    for _ in 0..20 {
        let beta = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let rewards: Vec<RewardTable> = (0..2).map(|_| random_rewards(&mut rng, 1, 2, 2.0)).collect();
        let reference = random_policy(&mut rng, 1, 2);
        let rho = PromptDistribution::uniform(1);
        let value = |policy: &PolicyTable| {
            rewards
                .iter()
                .map(|r| kl_value(policy, r, &reference, &rho, beta).unwrap().value)
                .fold(f64::INFINITY, f64::min)
        };
        let solution = solve_maxmin_policy(
            MaxMinProblem {
                rewards: &rewards,
                reference: &reference,
                rho: &rho,
                beta,
                penalty: None,
            },
            &solver,
        )
        .unwrap();
        let oracle = (1..10_000)
            .map(|i| {
                let t = i as f64 * 1e-4;
                value(&PolicyTable::from_rows(&[vec![t, 1.0 - t]]).unwrap())
            })
            .fold(f64::NEG_INFINITY, f64::max);
        worst_value = worst_value.max((value(&solution.policy) - oracle).abs());
    }

    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let (d, k, groups) = (rng.random_range(2..=6), rng.random_range(1..=3), rng.random_range(1..=3));
        let (_, ds) = random_dataset(&mut rng, 3, 4, d, groups, 60);
        let params = SharedRepParams {
            b: DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal)),
            w: DMatrix::from_fn(k, groups, |_, _| rng.random::<f64>()),
        };
        let (gb, gw) = bce_gradients(&params, &ds);
        let h = 1e-6;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (analytic, which) in [(&gb, 0), (&gw, 1)] {
            for idx in 0..analytic.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let (mp, mm) = if which == 0 { (&mut plus.b, &mut minus.b) } else { (&mut plus.w, &mut minus.w) };
                mp[idx] += h;
                mm[idx] -= h;
                let fd = (bce_loss(&plus, &ds) - bce_loss(&minus, &ds)) / (2.0 * h);
                diff2 += (fd - analytic[idx]).powi(2);
                norm2 += analytic[idx].powi(2);
            }
        }
        worst_grad = worst_grad.max(diff2.sqrt() / norm2.sqrt().max(1e-12));
    }

    let pass = worst_tv <= 1e-4 && worst_value <= 1e-3 && worst_grad <= 1e-5;
    let detail = format!(
        "single-group max row TV to Gibbs {worst_tv:.2e} (50 instances); two-group value vs grid oracle {worst_value:.2e} (20 instances); gradient relative error {worst_grad:.2e} (20 instances)"
    );
    assert!(report(6, "solver and gradients", pass, &detail, started));
}

#[test]
fn criterion_8_default_sweep_is_deterministic() {
    let started = Instant::now();
    let scenario = ScenarioConfig::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut texts = Vec::new();
    for dir in &dirs {
        let outcome = sweep(&scenario, None).unwrap();
        let manifest = emit(&outcome, dir.path()).unwrap();
        assert!(!manifest.incomplete, "{:?}", manifest.trial_errors);
        texts.push(std::fs::read(dir.path().join("results.csv")).unwrap());
    }
    let rows = texts[0].iter().filter(|&&b| b == b'\n').count() - 1;
    let pass = texts[0] == texts[1];
    let detail = format!("two runs of {} trials, results.csv {} bytes / {rows} rows, identical: {pass}", scenario.grid().len(), texts[0].len());
    assert!(report(8, "determinism", pass, &detail, started));
}
