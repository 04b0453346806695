//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use cwbc::conservatism::{draw_offsets, ResolvedConservatism};
use cwbc::data::OfflineDataset;
use cwbc::env::{generate_dataset, reference_returns, DatasetRecipe, EnvSpec};
use cwbc::eval::{evaluate_policy, rollout_conditioned, Basis, CellResult, EvalConfig, Target};
use cwbc::nn::{flatten, Mode};
use cwbc::oracle::{
    combined_gradient_error, gradient_fixture, max_relative_error, oracle_bin_probs, oracle_noise_support,
    total_variation,
};
use cwbc::policy::{Batch, Reduction, RvsPolicy};
use cwbc::report::{report_histograms, write_histogram_csv};
use cwbc::rng::{stream, Stream};
use cwbc::trainer::{train, TrainConfig, Variant};
use cwbc::weighting::{bin_probabilities, filter_top_fraction, WeightingConfig};
use rand::Rng;

const SAMPLER_DRAWS: usize = 200_000;
const SAMPLER_TV: f64 = 0.01;
const LAMBDA_ZERO_REL: f64 = 1e-12;
const LAMBDA_LARGE_REL: f64 = 1e-6;
const GRAD_REL: f64 = 1e-4;
const GRAD_FIXTURES: u64 = 20;
const NOISE_DRAWS: usize = 1_000_000;
const NOISE_STD_REL: f64 = 0.02;
const ROLLOUTS: usize = 1000;
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_TRAJECTORIES: usize = 2000;
const TREND_ITERATIONS: usize = 20_000;
const WC_OOD_FLOOR: f64 = 0.8;
const WC_WINS: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn med_replay(n: usize) -> (EnvSpec, OfflineDataset) {
    let env = EnvSpec::lineworld();
    let ds = generate_dataset(&DatasetRecipe::named("med-replay", env.clone(), n, 0).unwrap()).unwrap();
    (env, ds)
}

/// Bins recomputed here: stable ascending sort, the `N mod B` lowest bins one larger.
fn brute_force_bins(returns: &[f64], b: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..returns.len()).collect();
    order.sort_by(|&i, &j| returns[i].partial_cmp(&returns[j]).unwrap());
    let mut bins = Vec::new();
    let mut at = 0;
    for k in 0..b {
        let size = returns.len() / b + usize::from(k < returns.len() % b);
        bins.push(order[at..at + size].to_vec());
        at += size;
    }
    bins
}

fn sampler_law() -> Outcome {
    let t0 = Instant::now();
    let (_, ds) = med_replay(2000);
    let returns = ds.returns();
    let n = returns.len() as f64;
    let mut sorted = returns.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r_star = sorted[sorted.len() - 1];
    let r_90 = sorted[(90 * sorted.len()).div_ceil(100) - 1];
    let kappa = r_star - r_90;
    let bins = brute_force_bins(&returns, 20);
    let freqs: Vec<f64> = bins.iter().map(|b| b.len() as f64 / n).collect();
    let means: Vec<f64> = bins
        .iter()
        .map(|b| b.iter().map(|&i| returns[i]).sum::<f64>() / b.len() as f64)
        .collect();
    let reference = oracle_bin_probs(&freqs, &means, 0.01, kappa, r_star).unwrap();

    let layout = WeightingConfig::default().layout(&ds).unwrap();
    let mut bin_of = vec![0usize; returns.len()];
    for (k, b) in bins.iter().enumerate() {
        for &i in b {
            bin_of[i] = k;
        }
    }
    let mut rng = stream(11, Stream::Sampler, 0);
    let mut counts = vec![0usize; 20];
    for _ in 0..SAMPLER_DRAWS {
        counts[bin_of[layout.sample_trajectory(&mut rng)]] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / SAMPLER_DRAWS as f64).collect();
    let tv = total_variation(&empirical, &reference);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        tv <= SAMPLER_TV && secs < 10.0,
        format!("TV {tv:.5} (bound {SAMPLER_TV}), {secs:.2}s (bound 10s)"),
    )
}

fn lambda_kappa_limits() -> Outcome {
    let (_, ds) = med_replay(2000);
    let mut worst = (0.0f64, 0.0f64);
    for (num_bins, kappa) in [(20, 0.5), (20, 3.0), (7, 1.0), (50, 10.0)] {
        let layout = cwbc::weighting::build_bins(&ds, num_bins).unwrap();
        let r_star = ds.stats().max_return;
        let norm = |w: Vec<f64>| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let e: Vec<f64> = layout
            .mean_returns()
            .iter()
            .map(|r| (-(r - r_star).abs() / kappa).exp())
            .collect();
        let fe: Vec<f64> = e.iter().zip(layout.frequencies()).map(|(a, f)| a * f).collect();
        let zero = bin_probabilities(&layout, 0.0, kappa, r_star).unwrap();
        let large = bin_probabilities(&layout, 1e9, kappa, r_star).unwrap();
        worst.0 = worst.0.max(max_relative_error(&zero, &norm(e), 0.0));
        worst.1 = worst.1.max(max_relative_error(&large, &norm(fe), 0.0));
    }
    outcome(
        worst.0 <= LAMBDA_ZERO_REL && worst.1 <= LAMBDA_LARGE_REL,
        format!(
            "lambda=0 rel {:.2e} (bound {LAMBDA_ZERO_REL:e}), lambda=1e9 rel {:.2e} (bound {LAMBDA_LARGE_REL:e})",
            worst.0, worst.1
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for reduction in [Reduction::PerTrajectory, Reduction::Flattened] {
        for seed in 0..GRAD_FIXTURES {
            worst = worst.max(combined_gradient_error(7000 + seed, reduction).unwrap());
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= GRAD_REL && secs < 60.0,
        format!("{checked} fixtures, max rel error {worst:.2e} (bound {GRAD_REL:e}), {secs:.2}s (bound 60s)"),
    )
}

fn conservatism_support() -> Outcome {
    let t0 = Instant::now();
    let mut rng = stream(5, Stream::Oracle, 40);
    let mut fixtures: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| {
            let r_star = rng.random_range(-100.0..1000.0);
            let r_tau = r_star - rng.random_range(0.0..50.0);
            let sigma = rng.random_range(0.01..100.0);
            (r_tau, r_star, sigma)
        })
        .collect();
    fixtures.push((17.3, 17.3, 0.7));
    fixtures.push((1e6 - 0.1, 1e6, 1e-3));
    let mut violations = 0;
    let mut worst_std = 0.0f64;
    let mut total = 0;
    for (k, &(r_tau, r_star, sigma)) in fixtures.iter().enumerate() {
        let check =
            oracle_noise_support(r_tau, r_star, sigma, NOISE_DRAWS, &mut stream(k as u64, Stream::Noise, 77)).unwrap();
        violations += check.violations;
        total += NOISE_DRAWS;
        worst_std = worst_std.max((check.sample_std - sigma).abs() / sigma);
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        violations == 0 && worst_std <= NOISE_STD_REL && secs < 30.0,
        format!(
            "{violations}/{total} outside support, worst std rel error {worst_std:.4} (bound {NOISE_STD_REL}), {secs:.2}s (bound 30s)"
        ),
    )
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn indicator_and_alpha_zero() -> Outcome {
    let mut nonzero_c = 0;
    let mut mismatches = 0;
    let mut cases = 0;
    for seed in 0..30 {
        let (policy, trajs) = gradient_fixture(9000 + seed).unwrap();
        let stats = cwbc::data::build_stats(&trajs).unwrap();
        let batch = Batch::new(&trajs);
        let bc = policy.bc_loss(&batch, Reduction::PerTrajectory).unwrap();
        let inactive = ResolvedConservatism {
            percentile_q: 100,
            sigma: 1.0,
            alpha: 1.0,
        };
        let draws = draw_offsets(&batch, &inactive, &stats, &mut stream(seed, Stream::Noise, 1)).unwrap();
        let c = cwbc::conservatism::conservative_loss_with_offsets(&policy, &batch, &draws, Reduction::PerTrajectory)
            .unwrap();
        if !draws.members.is_empty() || c != 0.0 {
            nonzero_c += 1;
        }
        for q in [0u8, 50, 100] {
            let zero_alpha = ResolvedConservatism {
                percentile_q: q,
                sigma: 1.0,
                alpha: 0.0,
            };
            let v = policy
                .combined_objective(
                    &batch,
                    Some((&zero_alpha, &stats)),
                    Reduction::PerTrajectory,
                    &mut stream(seed, Stream::Noise, 2),
                    Mode::Inference,
                )
                .unwrap();
            cases += 1;
            if bits(&flatten(&v.grads)) != bits(&flatten(&bc.grads)) || v.total.to_bits() != bc.total.to_bits() {
                mismatches += 1;
            }
        }
    }

    let (_, ds) = med_replay(100);
    let base = TrainConfig {
        iterations: 200,
        batch_size: 8,
        hidden: vec![16, 16],
        weighting: WeightingConfig {
            num_bins: 10,
            ..WeightingConfig::default()
        },
        seed: 4,
        ..TrainConfig::default()
    };
    let w = train(&ds, &TrainConfig { variant: Variant::W, ..base.clone() }).unwrap();
    let mut wc0 = TrainConfig { variant: Variant::WC, ..base };
    wc0.conservatism.alpha = 0.0;
    let wc0 = train(&ds, &wc0).unwrap();
    let trained_equal = w.policy.to_json(None) == wc0.policy.to_json(None);
    outcome(
        nonzero_c == 0 && mismatches == 0 && trained_equal,
        format!(
            "C nonzero in {nonzero_c}/30 batches without qualifiers, alpha=0 gradient mismatches {mismatches}/{cases}, W vs WC(alpha=0) checkpoints equal: {trained_equal}"
        ),
    )
}

fn rtg_bookkeeping() -> Outcome {
    let mut failures = 0;
    let mut rollouts = 0;
    let mut steps = 0;
    for env in [EnvSpec::lineworld(), EnvSpec::planeworld()] {
        let mut rng = stream(3, Stream::Init, 0);
        let policy = RvsPolicy::new(
            cwbc::nn::DenseNet::init(&[env.state_dim + 1, 16, env.action_dim], 0.0, &mut rng).unwrap(),
            vec![0.0; env.state_dim],
            vec![0.5; env.state_dim],
            env.horizon,
        )
        .unwrap();
        for k in 0..ROLLOUTS / 2 {
            let g = [0.0, 3.7, 12.0, 17.5, 35.0, -4.0, 1e4][k % 7] + k as f64 * 1e-3;
            let r = rollout_conditioned(&policy, &env, g, &mut stream(k as u64, Stream::Eval, 0)).unwrap();
            rollouts += 1;
            steps += r.omegas.len();
            if r.omegas.len() != env.horizon || r.check_bookkeeping(env.horizon).is_err() {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0 && rollouts >= ROLLOUTS,
        format!("{rollouts} rollouts, {steps} steps, {failures} with a bookkeeping mismatch"),
    )
}

struct TrendRun {
    variant: Variant,
    seed: u64,
    cell: CellResult,
}

fn trend_runs() -> Vec<TrendRun> {
    let (env, ds) = med_replay(TREND_TRAJECTORIES);
    let refs = reference_returns(&env, 100, 0).unwrap();
    let basis = Basis {
        dataset_max: ds.stats().max_return,
        refs,
    };
    let mut runs = Vec::new();
    for variant in [Variant::Base, Variant::WC, Variant::FC] {
        for seed in TREND_SEEDS {
            let cfg = TrainConfig {
                variant,
                seed,
                iterations: TREND_ITERATIONS,
                hidden: vec![64, 64],
                ..TrainConfig::default()
            };
            let out = train(&ds, &cfg).unwrap();
            let cell = evaluate_policy(&out.policy, &env, &basis, Target::Expert(1.0), &EvalConfig::default()).unwrap();
            println!(
                "    trend {variant} seed {seed}: ood-drop {:.3}, std at 2x max {:.3}, headline {:.2}",
                cell.ood_drop.unwrap_or(f64::NAN),
                cell.std_at_double_max.unwrap_or(f64::NAN),
                cell.headline.mean
            );
            runs.push(TrendRun { variant, seed, cell });
        }
    }
    runs
}

fn crash_rescue(runs: &[TrendRun]) -> Outcome {
    let ood = |v: Variant, s: u64| {
        runs.iter()
            .find(|r| r.variant == v && r.seed == s)
            .and_then(|r| r.cell.ood_drop)
            .unwrap_or(f64::NAN)
    };
    let wins = TREND_SEEDS.iter().filter(|&&s| ood(Variant::WC, s) > ood(Variant::Base, s)).count();
    let mean_wc = TREND_SEEDS.iter().map(|&s| ood(Variant::WC, s)).sum::<f64>() / TREND_SEEDS.len() as f64;
    let mean_base = TREND_SEEDS.iter().map(|&s| ood(Variant::Base, s)).sum::<f64>() / TREND_SEEDS.len() as f64;
    outcome(
        wins >= WC_WINS && mean_wc >= WC_OOD_FLOOR,
        format!(
            "WC ood-drop above base in {wins}/5 seeds (need {WC_WINS}), mean WC {mean_wc:.3} (need {WC_OOD_FLOOR}), mean base {mean_base:.3}"
        ),
    )
}

fn hard_filter(runs: &[TrendRun]) -> Outcome {
    let (_, ds) = med_replay(TREND_TRAJECTORIES);
    let kept = filter_top_fraction(&ds, 0.1).unwrap();
    let expected = (TREND_TRAJECTORIES as f64 * 0.1).ceil() as usize;
    let mut returns = ds.returns();
    returns.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut kept_returns = kept.returns();
    kept_returns.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let exact = kept.len() == expected && kept_returns == returns[..expected];

    let std_at = |v: Variant| {
        let xs: Vec<f64> = runs
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.cell.std_at_double_max.unwrap_or(f64::NAN))
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (fc, wc) = (std_at(Variant::FC), std_at(Variant::WC));
    outcome(
        exact && fc > wc,
        format!(
            "kept {} of {TREND_TRAJECTORIES} (expected {expected}, top returns: {exact}), mean std at 2x max FC {fc:.4} vs WC {wc:.4}",
            kept.len()
        ),
    )
}

fn determinism() -> Outcome {
    let once = || {
        let env = EnvSpec::planeworld();
        let ds = generate_dataset(&DatasetRecipe::named("med-expert", env.clone(), 120, 9).unwrap()).unwrap();
        let cfg = TrainConfig {
            iterations: 300,
            batch_size: 16,
            hidden: vec![16, 16],
            dropout: 0.1,
            weighting: WeightingConfig {
                num_bins: 10,
                ..WeightingConfig::default()
            },
            seed: 21,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg).unwrap();
        let mut log = Vec::new();
        out.log.write_csv(&mut log, false).unwrap();
        let refs = reference_returns(&env, 20, 0).unwrap();
        let basis = Basis {
            dataset_max: ds.stats().max_return,
            refs,
        };
        let eval = EvalConfig {
            episodes: 3,
            seed: 2,
            ..EvalConfig::default()
        };
        let cell = evaluate_policy(&out.policy, &env, &basis, Target::Expert(1.0), &eval).unwrap();
        let mut curve = Vec::new();
        cell.curve.write_csv(&mut curve).unwrap();
        let mut hist = Vec::new();
        write_histogram_csv(&report_histograms(&ds, &cfg.weighting).unwrap(), &mut hist).unwrap();
        (ds.to_jsonl(), out.policy.to_json(Some(cfg.fingerprint())), log, curve, hist)
    };
    let a = once();
    let b = once();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3, a.4 == b.4];
    outcome(
        same.iter().all(|&s| s),
        format!("dataset, checkpoint, log CSV, curve CSV, histogram CSV byte-identical: {same:?}"),
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest arguments such as `--nocapture`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o));
        }
    };
    run(1, "sampler law", &sampler_law);
    run(2, "lambda/kappa limit identities", &lambda_kappa_limits);
    run(3, "gradient correctness", &gradient_correctness);
    run(4, "conservatism support", &conservatism_support);
    run(5, "indicator and alpha=0 reductions", &indicator_and_alpha_zero);
    run(6, "RTG bookkeeping identity", &rtg_bookkeeping);
    if wanted(7) || wanted(8) {
        let t0 = Instant::now();
        let runs = trend_runs();
        println!("    trend runs took {:.0}s", t0.elapsed().as_secs_f64());
        run(7, "crash/rescue trend", &|| crash_rescue(&runs));
        run(8, "hard-filter baseline", &|| hard_filter(&runs));
    }
    run(9, "determinism", &determinism);
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
