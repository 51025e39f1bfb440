//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL ...` line each; exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,4,10` restricts the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mirrorlab::cli::{AblateFile, HeatmapFile, MetaTrainFile, TrainFile, VerifyFile};
use mirrorlab::drift::{
    drift_dr, drift_eval, objective_per_sample, verify_drift, DriftSpec, FeatureMask, LearnedDrift,
    Tolerances, VerifyGrid, DEFAULT_XI,
};
use mirrorlab::envs::{EnvId, EnvSpec};
use mirrorlab::es::{es_gradient, meta_objective, meta_train, perturbation, EsConfig, Shaping};
use mirrorlab::nn::{Activation, MlpSpec};
use mirrorlab::policy::PolicyParams;
use mirrorlab::trainer::{surrogate_loss, surrogate_loss_grad, train, Samples, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let eps = 0.2;
    let spec = DriftSpec::ppo(eps);
    let mut worst = 0.0f64;
    for r in linspace(0.01, 3.0, 300) {
        for a in linspace(-3.0, 3.0, 300) {
            let want = (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
            worst = worst.max((objective_per_sample(&spec, r, a) - want).abs());
        }
    }
    let el = t.elapsed();
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    check(el < Duration::from_secs(1), format!("took {el:?}"))?;
    Ok(format!(
        "max |objective - min(rA, clip(r)A)| = {worst:e} in {el:.2?}"
    ))
}

/// The twenty random learned drifts of the validity suite: ten residual
/// (one tanh layer of 128) and ten plain, alternating that architecture with
/// two ReLU layers of 64.
fn random_learned_drifts(seed: u64) -> Vec<DriftSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relu = MlpSpec::new(8, vec![64, 64], Activation::Relu, false, 1).unwrap();
    (0..20)
        .map(|i| {
            let residual = i < 10;
            let spec = if residual || i % 2 == 0 {
                LearnedDrift::residual_spec()
            } else {
                relu.clone()
            };
            DriftSpec::Learned(LearnedDrift::init_uniform(spec, residual, &mut rng).unwrap())
        })
        .collect()
}

fn validity_failures(specs: &[DriftSpec]) -> Vec<String> {
    specs
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let rep = verify_drift(s, &VerifyGrid::default(), &Tolerances::default()).unwrap();
            (!rep.valid).then(|| format!("#{i} {}: {:?}", rep.drift, rep.violations.first()))
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut specs = vec![DriftSpec::ppo(0.2), DriftSpec::dpo()];
    specs.extend(random_learned_drifts(2));
    let failures = validity_failures(&specs);
    let el = t.elapsed();
    check(failures.is_empty(), failures.join("; "))?;
    check(el < Duration::from_secs(10), format!("took {el:?}"))?;
    Ok(format!(
        "{} drifts valid on the 300x300 grid in {el:.2?}",
        specs.len()
    ))
}

fn criterion_3() -> Outcome {
    let (alpha, beta) = (2.0, 0.6);
    let spec = DriftSpec::Dpo { alpha, beta };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let (mut checked, mut worst_formula, mut worst_fd) = (0usize, 0.0f64, 0.0f64);
    while checked < 10_000 {
        let r: f64 = rng.gen_range(0.05..3.0);
        let a: f64 = rng.gen_range(-3.0..3.0);
        let (u, s) = if a >= 0.0 {
            ((r - 1.0) * a, alpha)
        } else {
            (r.ln() * a, beta)
        };
        let pre = u - s * (u / s).tanh();
        if !(pre > 1e-6) {
            continue;
        }
        checked += 1;
        let sech2 = |x: f64| 1.0 / x.cosh().powi(2);
        let want = if a >= 0.0 {
            a - a * sech2((r - 1.0) * a / alpha)
        } else {
            (a / r) * (1.0 - sech2(r.ln() * a / beta))
        };
        let got = drift_dr(&spec, r, a).value;
        worst_formula = worst_formula.max((got - want).abs());
        let fd = (drift_eval(&spec, r + h, a) - drift_eval(&spec, r - h, a)) / (2.0 * h);
        worst_fd = worst_fd.max((fd - got).abs() / got.abs().max(1.0));
    }
    check(
        worst_formula <= 1e-10,
        format!("closed form off by {worst_formula:e}"),
    )?;
    check(
        worst_fd <= 1e-5,
        format!("finite differences off by {worst_fd:e}"),
    )?;
    Ok(format!(
        "10000 active points: closed form {worst_formula:e}, finite difference {worst_fd:e}"
    ))
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let phi: Vec<f64> = (0..10).map(|i| 1.0 - 0.2 * i as f64).collect();
    let f = |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>();
    let est = es_gradient(&phi, f, 10_000, 0.05, 4, Shaping::None).map_err(|e| e.to_string())?;
    let truth: Vec<f64> = phi.iter().map(|p| -2.0 * p).collect();
    let err = est
        .gradient
        .iter()
        .zip(&truth)
        .map(|(g, t)| (g - t).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    let rel = err / norm;
    check(rel < 0.05, format!("quadratic relative error {rel:.4}"))?;

    let g: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let x0: Vec<f64> = (0..6).map(|i| 0.5 * i as f64).collect();
    let sigma = 0.05;
    let lin = |x: &[f64]| g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - 1.0;
    let lest = es_gradient(&x0, lin, 64, sigma, 8, Shaping::None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for p in &lest.pairs {
        let eps = perturbation(8, 0, p.pair as u64, g.len());
        let dot: f64 = g.iter().zip(&eps).map(|(a, b)| a * b).sum();
        worst = worst.max(((p.plus - p.minus) / (2.0 * sigma) - dot).abs() / dot.abs().max(1.0));
    }
    check(
        worst <= 1e-12,
        format!("linear per-pair deviation {worst:e}"),
    )?;
    let el = t.elapsed();
    check(el < Duration::from_secs(5), format!("took {el:?}"))?;
    Ok(format!(
        "quadratic relative error {rel:.4}; linear per-pair deviation {worst:e}; {el:.2?}"
    ))
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    for env in [EnvSpec::cartpole(), EnvSpec::pendulum()] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut policy = PolicyParams::init(&env, &[2], &mut rng).map_err(|e| e.to_string())?;
        if !policy.log_std.is_empty() {
            policy.log_std[0] = -0.3;
        }
        let od = env.obs_dim();
        let n = 32;
        let states: Vec<f64> = (0..n * od).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let actions: Vec<f64> = match env.id {
            EnvId::Cartpole => (0..n).map(|_| rng.gen_range(0..2) as f64).collect(),
            EnvId::Pendulum => (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let aw = actions.len() / n;
        // old log-probs away from the current ones so ratios spread over both
        // sides of the clip range
        let old: Vec<f64> = (0..n)
            .map(|k| {
                let lp = mirrorlab::policy::policy_log_prob(
                    &policy,
                    &states[k * od..(k + 1) * od],
                    &actions[k * aw..(k + 1) * aw],
                )
                .unwrap();
                lp - rng.gen_range(-0.5..0.5)
            })
            .collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let samples = Samples {
            states: &states,
            actions: &actions,
            old_log_probs: &old,
            advantages: &adv,
        };
        for drift in [DriftSpec::ppo(0.2), DriftSpec::dpo()] {
            let (_, grad) = surrogate_loss_grad(&policy, &drift, samples);
            let flat = policy.to_flat();
            let h = 1e-6;
            let mut fd = vec![0.0; flat.len()];
            for i in 0..flat.len() {
                let mut p = policy.clone();
                let mut x = flat.clone();
                x[i] += h;
                p.set_flat(&x).unwrap();
                let up = surrogate_loss(&p, &drift, samples);
                x[i] -= 2.0 * h;
                p.set_flat(&x).unwrap();
                let down = surrogate_loss(&p, &drift, samples);
                fd[i] = (up - down) / (2.0 * h);
            }
            let diff = grad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let rel = diff / norm;
            check(
                rel < 1e-4,
                format!("{} on {}: relative error {rel:e}", drift.name(), env.id),
            )?;
            worst = worst.max(rel);
        }
    }
    Ok(format!(
        "worst relative error {worst:e} (ppo, dpo; categorical and Gaussian)"
    ))
}

fn criterion_6() -> Outcome {
    let mut drifts = vec![DriftSpec::ppo(0.2), DriftSpec::dpo()];
    drifts.extend(random_learned_drifts(6).into_iter().step_by(5));
    let mut worst_dev = 0.0f64;
    let mut worst_drift = 0.0f64;
    let mut n = 0;
    for env in [EnvSpec::cartpole(), EnvSpec::pendulum()] {
        let cfg = TrainConfig {
            total_timesteps: 4096,
            ..TrainConfig::default_for(&env)
        };
        for d in &drifts {
            let rec = train(&env, d, &cfg).map_err(|e| e.to_string())?;
            for m in &rec.iterations {
                worst_dev = worst_dev.max(m.first_pass_max_ratio_dev);
                worst_drift = worst_drift.max(m.first_pass_drift_mean);
                n += 1;
            }
        }
    }
    check(worst_dev <= 1e-6, format!("max |r - 1| = {worst_dev:e}"))?;
    check(
        worst_drift <= DEFAULT_XI,
        format!("mean drift {worst_drift:e}"),
    )?;
    Ok(format!(
        "{n} iterations: max |r - 1| = {worst_dev:e}, max mean drift = {worst_drift:e}"
    ))
}

struct CartpoleRuns {
    ppo: Vec<f64>,
}

fn final_returns(
    env: &EnvSpec,
    drift: &DriftSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(Vec<f64>, Vec<f64>, Duration), String> {
    let mut rets = Vec::new();
    let mut ents = Vec::new();
    let mut slowest = Duration::ZERO;
    for &s in seeds {
        let t = Instant::now();
        let rec = train(
            env,
            drift,
            &TrainConfig {
                seed: s,
                ..cfg.clone()
            },
        )
        .map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed());
        rets.push(rec.final_eval_return.unwrap_or(f64::NAN));
        ents.push(rec.final_entropy.unwrap_or(f64::NAN));
    }
    Ok((rets, ents, slowest))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn criterion_7(store: &mut Option<CartpoleRuns>) -> Outcome {
    let env = EnvSpec::cartpole();
    let cfg = TrainConfig::cartpole();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut ppo = Vec::new();
    for drift in [DriftSpec::ppo(0.2), DriftSpec::dpo()] {
        let (rets, _, slowest) = final_returns(&env, &drift, &cfg, &SEEDS)?;
        let solved = rets.iter().filter(|&&r| r >= 475.0).count();
        ok &= solved >= 4 && slowest < Duration::from_secs(180);
        lines.push(format!(
            "{} {solved}/5 solved {:?} (slowest {slowest:.1?})",
            drift.name(),
            rets
        ));
        if drift.name() == "ppo" {
            ppo = rets;
        }
    }
    *store = Some(CartpoleRuns { ppo });
    check(ok, lines.join("; "))?;
    Ok(lines.join("; "))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let env = EnvSpec::pendulum();
    let cfg = TrainConfig::pendulum();
    let (_, ppo, _) = final_returns(&env, &DriftSpec::ppo(0.2), &cfg, &SEEDS)?;
    let (_, dpo, _) = final_returns(&env, &DriftSpec::dpo(), &cfg, &SEEDS)?;
    let (mp, md) = (median(&ppo), median(&dpo));
    let el = t.elapsed();
    check(
        md > mp,
        format!("median entropy dpo {md:.4} <= ppo {mp:.4}"),
    )?;
    check(el < Duration::from_secs(15 * 60), format!("took {el:?}"))?;
    Ok(format!(
        "median final entropy dpo {md:.4} > ppo {mp:.4} ({el:.1?})"
    ))
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let (m, s) = mirrorlab::es::mean_std(v);
    (m, s / (v.len() as f64).sqrt())
}

fn criterion_9(store: &mut Option<CartpoleRuns>) -> Outcome {
    let t = Instant::now();
    let cfg = EsConfig::desk();
    let out = meta_train(&cfg, 0, None).map_err(|e| e.to_string())?;
    let hist = &out.state.history;
    check(hist.len() == 20, format!("{} generations", hist.len()))?;
    let monotone = hist
        .windows(2)
        .all(|w| w[1].best_so_far >= w[0].best_so_far);
    check(monotone, "best-so-far decreased")?;
    let finals = [out.state.drift().unwrap(), out.state.best_drift().unwrap()];
    let failures = validity_failures(&finals);
    check(
        failures.is_empty(),
        format!("meta-trained drift invalid: {}", failures.join("; ")),
    )?;
    let es_time = t.elapsed();

    // phi = 0 under the cart-pole acceptance config, against the PPO runs
    // of the training-success criterion on the same seeds
    let ppo = match store.take() {
        Some(r) => r.ppo,
        None => {
            final_returns(
                &EnvSpec::cartpole(),
                &DriftSpec::ppo(0.2),
                &TrainConfig::cartpole(),
                &SEEDS,
            )?
            .0
        }
    };
    let zero_cfg = EsConfig {
        inner: TrainConfig::cartpole(),
        ..cfg.clone()
    };
    let phi0 = vec![0.0; zero_cfg.param_count()];
    let zero: Vec<f64> = SEEDS
        .iter()
        .map(|&s| meta_objective(&phi0, &zero_cfg, &[], s).map(|f| f.value))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mz, sz) = mean_se(&zero);
    let (mp, sp) = mean_se(&ppo);
    let overlap = (mz - 2.0 * sz) <= (mp + 2.0 * sp) && (mp - 2.0 * sp) <= (mz + 2.0 * sz);
    let el = t.elapsed();
    let summary = format!(
        "ES best {:.1} (gen 0 mean {:.1}, last mean {:.1}) in {es_time:.1?}; phi=0 {mz:.1}+-{sz:.1} vs ppo {mp:.1}+-{sp:.1}",
        out.state.best_fitness.unwrap_or(f64::NAN),
        hist[0].mean_fitness,
        hist.last().unwrap().mean_fitness,
    );
    check(overlap, format!("2-SE intervals disjoint: {summary}"))?;
    check(el < Duration::from_secs(3600), format!("took {el:?}"))?;
    Ok(summary)
}

fn criterion_10() -> Outcome {
    let cfg = EsConfig {
        population_size: 32,
        ..EsConfig::desk()
    };
    let got = cfg.sigma_at(100);
    let want = 0.01f64.max(0.04 * 0.999f64.powi(100));
    check(
        (got - want).abs() <= 1e-12,
        format!("sigma {got} vs {want}"),
    )?;
    Ok(format!("sigma(100) = {got:.12}"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mirrorlab")
}

fn run_cli(args: &[&str]) -> i32 {
    let status = Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .expect("spawn mirrorlab");
    status.code().unwrap_or(-1)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        total_timesteps: 2048,
        unroll_length: 32,
        n_envs: 8,
        n_minibatches: 8,
        n_update_epochs: 2,
        hidden_layers: vec![16],
        eval_episodes: 3,
        eval_interval: 2,
        ..TrainConfig::cartpole()
    }
}

fn tiny_es() -> EsConfig {
    EsConfig {
        population_size: 4,
        n_generations: 2,
        eval_episodes: 3,
        inner: TrainConfig {
            total_timesteps: 1024,
            eval_interval: 0,
            ..tiny_train()
        },
        ..EsConfig::desk()
    }
}

fn criterion_11() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = root.path();
    let write = |name: &str, text: String| {
        let p = r.join(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let train_cfg = write(
        "train.toml",
        toml::to_string(&TrainFile {
            train: tiny_train(),
            ..TrainFile::default_for(EnvId::Cartpole)
        })
        .unwrap(),
    );
    let meta_cfg = write(
        "meta.toml",
        toml::to_string(&MetaTrainFile {
            seed: 3,
            es: tiny_es(),
        })
        .unwrap(),
    );
    let ablate_cfg = write(
        "ablate.toml",
        toml::to_string(&AblateFile {
            seed: 3,
            masks: vec![FeatureMask::ALL, FeatureMask::from_indices(&[0, 4])],
            es: tiny_es(),
        })
        .unwrap(),
    );
    let verify_cfg = write(
        "verify.toml",
        toml::to_string(&VerifyFile::default()).unwrap(),
    );
    let heat_cfg = write(
        "heat.toml",
        toml::to_string(&HeatmapFile::default()).unwrap(),
    );

    let mut compared = 0;
    for round in ["a", "b"] {
        let o = |sub: &str| r.join(round).join(sub).to_string_lossy().into_owned();
        let steps: Vec<Vec<String>> = vec![
            vec![
                "train".into(),
                "--config".into(),
                train_cfg.clone(),
                "--drift".into(),
                "dpo".into(),
                "--seeds".into(),
                "2".into(),
                "--seed".into(),
                "5".into(),
                "--out".into(),
                o("train"),
            ],
            vec![
                "meta-train".into(),
                "--config".into(),
                meta_cfg.clone(),
                "--out".into(),
                o("meta"),
            ],
            vec![
                "verify-drift".into(),
                "--config".into(),
                verify_cfg.clone(),
                "--drift".into(),
                "dpo".into(),
                "--out".into(),
                o("verify"),
            ],
            vec![
                "heatmap".into(),
                "--config".into(),
                heat_cfg.clone(),
                "--drift".into(),
                "dpo".into(),
                "--out".into(),
                o("heatmap"),
            ],
            vec![
                "compare".into(),
                o("train"),
                o("train"),
                "--out".into(),
                o("compare"),
            ],
            vec![
                "ablate-features".into(),
                "--config".into(),
                ablate_cfg.clone(),
                "--out".into(),
                o("ablate"),
            ],
        ];
        for args in &steps {
            let a: Vec<&str> = args.iter().map(String::as_str).collect();
            let code = run_cli(&a);
            check(code == 0, format!("{} exited {code}", args[0]))?;
        }
    }
    let (a, b) = (r.join("a"), r.join("b"));
    let fa = files_under(&a);
    check(fa == files_under(&b), "different file sets")?;
    for f in &fa {
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "csv" | "json" | "toml") {
            continue;
        }
        let (x, y) = (
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
        );
        check(x == y, format!("{} differs between reruns", f.display()))?;
        compared += 1;
    }
    Ok(format!(
        "{compared} output files byte-identical across reruns of 6 subcommands"
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut cartpole: Option<CartpoleRuns> = None;
    let mut failed = Vec::new();
    for n in 1..=11u32 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut cartpole),
            8 => criterion_8(),
            9 => criterion_9(&mut cartpole),
            10 => criterion_10(),
            11 => criterion_11(),
            _ => unreachable!(),
        }));
        let res = res.unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(msg) => println!("criterion {n}: PASS  {msg} [{:.1?}]", t.elapsed()),
            Err(msg) => {
                println!("criterion {n}: FAIL  {msg} [{:.1?}]", t.elapsed());
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
