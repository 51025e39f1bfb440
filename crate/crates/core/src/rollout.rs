//! Batch collection under the current policy, GAE and advantage
//! normalisation.
//!
//! Every per-sample field of a [`Batch`] is stored time-major: sample
//! `t * n_envs + i` is step `t` of environment instance `i`.

use std::path::Path;

use rand::Rng;

use crate::envs::{reset, Actions, EnvSpec, VecEnvState};
use crate::error::{Error, Result};
use crate::nn::{forward_into, MlpWeights, Tape};
use crate::policy::{log_prob_from_head, sample_from_head, PolicyKind, PolicyParams};

/// A vectorised environment together with the observation it is waiting on.
#[derive(Clone, Debug)]
pub struct EnvRunner {
    state: VecEnvState,
    obs: Vec<f64>,
}

impl EnvRunner {
    pub fn new(spec: &EnvSpec, n_envs: usize, seed: u64) -> Result<Self> {
        let (state, obs) = reset(spec, n_envs, seed)?;
        Ok(Self { state, obs })
    }

    pub fn spec(&self) -> &EnvSpec {
        self.state.spec()
    }

    pub fn n_envs(&self) -> usize {
        self.state.n_envs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs_dim: usize,
    pub action_width: usize,
    /// `[T*N x obs_dim]`
    pub states: Vec<f64>,
    /// `[T*N x action_width]`; categorical actions are stored as their index.
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub value_estimates: Vec<f64>,
    /// Normalised advantages.
    pub advantages: Vec<f64>,
    /// Value targets (raw advantages plus value estimates).
    pub returns: Vec<f64>,
    /// Undiscounted returns of episodes that finished during collection.
    pub completed_returns: Vec<f64>,
    /// True when the raw advantages had (near) zero variance.
    pub degenerate_advantages: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.obs_dim..(k + 1) * self.obs_dim]
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.actions[k * self.action_width..(k + 1) * self.action_width]
    }

    /// Columnar debugging dump.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "env".to_string()];
        header.extend((0..self.obs_dim).map(|d| format!("state_{d}")));
        header.extend((0..self.action_width).map(|d| format!("action_{d}")));
        header.extend(
            [
                "old_log_prob",
                "reward",
                "done",
                "value",
                "advantage",
                "return",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![(k / self.n_envs).to_string(), (k % self.n_envs).to_string()];
            row.extend(self.state(k).iter().map(|v| format!("{v:e}")));
            row.extend(self.action(k).iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", self.old_log_probs[k]));
            row.push(format!("{:e}", self.rewards[k]));
            row.push((self.dones[k] as u8).to_string());
            row.push(format!("{:e}", self.value_estimates[k]));
            row.push(format!("{:e}", self.advantages[k]));
            row.push(format!("{:e}", self.returns[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaeParams {
    pub gamma: f64,
    pub lambda: f64,
}

/// Rolls every instance forward `unroll_length` steps, sampling actions from
/// `policy`, then computes GAE and normalised advantages.
pub fn collect<R: Rng + ?Sized>(
    policy: &PolicyParams,
    critic: &MlpWeights,
    runner: &mut EnvRunner,
    unroll_length: usize,
    gae_params: GaeParams,
    rng: &mut R,
) -> Result<Batch> {
    if unroll_length == 0 {
        return Err(Error::Config("unroll_length must be >= 1".into()));
    }
    let n = runner.n_envs();
    let obs_dim = runner.spec().obs_dim();
    let kind = policy.kind;
    let aw = kind.action_width();
    let total = unroll_length * n;

    let mut states = Vec::with_capacity(total * obs_dim);
    let mut actions = vec![0.0; total * aw];
    let mut old_log_probs = vec![0.0; total];
    let mut rewards = Vec::with_capacity(total);
    let mut dones = Vec::with_capacity(total);
    let mut values = vec![0.0; total];
    let mut completed_returns = Vec::new();

    let mut ptape = Tape::new(policy.trunk.spec());
    let mut vtape = Tape::new(critic.spec());
    let mut discrete = vec![0usize; n];

    for t in 0..unroll_length {
        states.extend_from_slice(&runner.obs);
        for i in 0..n {
            let k = t * n + i;
            let s = &runner.obs[i * obs_dim..(i + 1) * obs_dim];
            forward_into(&policy.trunk, s, &mut ptape);
            let head = ptape.output();
            let a = &mut actions[k * aw..(k + 1) * aw];
            sample_from_head(kind, head, &policy.log_std, false, rng, a);
            let lp = log_prob_from_head(kind, head, &policy.log_std, a);
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-prob {lp} at step {t}, env {i}, action {a:?}, head {head:?}"
                )));
            }
            old_log_probs[k] = lp;
            forward_into(critic, s, &mut vtape);
            values[k] = vtape.output()[0];
            if let PolicyKind::Categorical { .. } = kind {
                discrete[i] = a[0] as usize;
            }
        }
        let step_actions = &actions[t * n * aw..(t + 1) * n * aw];
        let out = match kind {
            PolicyKind::Categorical { .. } => runner.state.step(Actions::Discrete(&discrete))?,
            PolicyKind::Gaussian { .. } => runner.state.step(Actions::Continuous(step_actions))?,
        };
        rewards.extend_from_slice(&out.rewards);
        dones.extend_from_slice(&out.dones);
        completed_returns.extend(out.completed.iter().map(|&(_, r)| r));
        runner.obs = out.observations;
    }

    let bootstrap: Vec<f64> = runner
        .obs
        .chunks_exact(obs_dim)
        .map(|s| {
            forward_into(critic, s, &mut vtape);
            vtape.output()[0]
        })
        .collect();
    let (raw, returns) = gae(
        &rewards,
        &values,
        &dones,
        &bootstrap,
        gae_params.gamma,
        gae_params.lambda,
    )?;
    let norm = normalise_advantages(&raw)?;

    Ok(Batch {
        n_steps: unroll_length,
        n_envs: n,
        obs_dim,
        action_width: aw,
        states,
        actions,
        old_log_probs,
        rewards,
        dones,
        value_estimates: values,
        advantages: norm.values,
        returns,
        completed_returns,
        degenerate_advantages: norm.degenerate,
    })
}

/// Generalised advantage estimation over time-major `[T x N]` sequences,
/// where `N = bootstrap_values.len()`. A done flag at step `t` cuts both the
/// bootstrap from `t + 1` and the recursion. Returns `(advantages, returns)`
/// with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} not in [0, 1]")));
    }
    let n = bootstrap_values.len();
    if n == 0
        || rewards.len() % n != 0
        || values.len() != rewards.len()
        || dones.len() != rewards.len()
    {
        return Err(Error::Dimension {
            context: "gae inputs",
            expected: rewards.len(),
            got: values.len().min(dones.len()),
        });
    }
    let t_len = rewards.len() / n;
    let mut adv = vec![0.0; rewards.len()];
    for i in 0..n {
        let mut next_value = bootstrap_values[i];
        let mut running = 0.0;
        for t in (0..t_len).rev() {
            let k = t * n + i;
            let cont = if dones[k] { 0.0 } else { 1.0 };
            let delta = rewards[k] + gamma * next_value * cont - values[k];
            running = delta + gamma * lambda * cont * running;
            adv[k] = running;
            next_value = values[k];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalisedAdvantages {
    pub values: Vec<f64>,
    /// Set when the input had (near) zero variance and zeros were returned.
    pub degenerate: bool,
}

/// Zero-mean, unit-std rescaling with the 1/N variance convention.
pub fn normalise_advantages(raw: &[f64]) -> Result<NormalisedAdvantages> {
    if raw.len() < 2 {
        return Err(Error::Config(
            "advantage normalisation needs at least 2 samples".into(),
        ));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-8 * mean.abs().max(1.0)) {
        log::warn!("advantages have zero variance (std = {std:e}); using zeros");
        return Ok(NormalisedAdvantages {
            values: vec![0.0; raw.len()],
            degenerate: true,
        });
    }
    Ok(NormalisedAdvantages {
        values: raw.iter().map(|a| (a - mean) / std).collect(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_terminal_transition() {
        let (adv, ret) = gae(&[1.0], &[0.5], &[true], &[123.0], 0.99, 0.95).unwrap();
        assert!((adv[0] - 0.5).abs() < 1e-15);
        assert!((ret[0] - 1.0).abs() < 1e-15);
    }

    fn random_sequence(
        seed: u64,
        len: usize,
        with_dones: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..len).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let v = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = (0..len).map(|_| with_dones && rng.gen_bool(0.25)).collect();
        (r, v, d, rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn lambda_zero_gives_td_residuals() {
        let g = 0.97;
        for seed in 0..20 {
            let len = 1 + seed as usize % 8;
            let (r, v, d, boot) = random_sequence(seed, len, true);
            let (adv, _) = gae(&r, &v, &d, &[boot], g, 0.0).unwrap();
            for t in 0..len {
                let next = if t + 1 < len { v[t + 1] } else { boot };
                let cont = if d[t] { 0.0 } else { 1.0 };
                let td = r[t] + g * next * cont - v[t];
                assert!((adv[t] - td).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_one_gives_monte_carlo_minus_baseline() {
        let g = 0.9;
        for seed in 0..20 {
            let len = 1 + seed as usize % 8;
            let (r, v, d, boot) = random_sequence(100 + seed, len, seed % 2 == 0);
            let (adv, _) = gae(&r, &v, &d, &[boot], g, 1.0).unwrap();
            for t in 0..len {
                // brute-force discounted sum up to the first terminal
                let mut total = 0.0;
                let mut disc = 1.0;
                let mut cut = false;
                for u in t..len {
                    total += disc * r[u];
                    disc *= g;
                    if d[u] {
                        cut = true;
                        break;
                    }
                }
                if !cut {
                    total += disc * boot;
                }
                assert!((adv[t] - (total - v[t])).abs() < 1e-12, "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn length_five_sequence_by_hand() {
        let r = [1.0, 0.0, 2.0, -1.0, 0.5];
        let v = [0.2, -0.1, 0.4, 0.0, 0.3];
        let g = 0.99;
        let (adv, ret) = gae(&r, &v, &[false; 5], &[0.7], g, 1.0).unwrap();
        let mc0 = 1.0 + g * 0.0 + g * g * 2.0 - g.powi(3) + 0.5 * g.powi(4) + g.powi(5) * 0.7;
        assert!((adv[0] - (mc0 - 0.2)).abs() < 1e-12);
        assert!((ret[0] - mc0).abs() < 1e-12);
    }

    #[test]
    fn interleaved_envs_are_independent() {
        // two envs, time-major
        let r = [1.0, 5.0, 2.0, 6.0];
        let v = [0.1, 0.2, 0.3, 0.4];
        let d = [false, false, true, false];
        let (adv, _) = gae(&r, &v, &d, &[9.0, -9.0], 0.9, 0.8).unwrap();
        let (a0, _) = gae(&[1.0, 2.0], &[0.1, 0.3], &[false, true], &[9.0], 0.9, 0.8).unwrap();
        let (a1, _) = gae(&[5.0, 6.0], &[0.2, 0.4], &[false, false], &[-9.0], 0.9, 0.8).unwrap();
        assert_eq!(adv, vec![a0[0], a1[0], a0[1], a1[1]]);
    }

    #[test]
    fn gae_rejects_bad_lambda() {
        assert!(gae(&[1.0], &[0.0], &[false], &[0.0], 0.99, 1.5).is_err());
    }

    #[test]
    fn normalise_symmetric_pair() {
        let n = normalise_advantages(&[1.0, -1.0]).unwrap();
        assert_eq!(n.values, vec![1.0, -1.0]);
        assert!(!n.degenerate);
    }

    #[test]
    fn normalise_constant_vector() {
        let n = normalise_advantages(&[3.0; 6]).unwrap();
        assert_eq!(n.values, vec![0.0; 6]);
        assert!(n.degenerate);
        assert!(normalise_advantages(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalised_moments(raw in prop::collection::vec(-100.0f64..100.0, 2..300)) {
            let n = normalise_advantages(&raw).unwrap();
            prop_assume!(!n.degenerate);
            let len = raw.len() as f64;
            let mean = n.values.iter().sum::<f64>() / len;
            let std = (n.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / len).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-3);
            let again = normalise_advantages(&n.values).unwrap();
            for (a, b) in again.values.iter().zip(&n.values) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn uniform_cartpole_policy() -> (PolicyParams, MlpWeights) {
        let env = EnvSpec::cartpole();
        let spec = MlpSpec::new(4, vec![4], Activation::Tanh, true, 2).unwrap();
        let policy = PolicyParams::new(
            PolicyKind::Categorical { n_actions: 2 },
            MlpWeights::zeros(spec).unwrap(),
            vec![],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cspec = MlpSpec::new(env.obs_dim(), vec![4], Activation::Tanh, true, 1).unwrap();
        (policy, MlpWeights::init_uniform(cspec, &mut rng).unwrap())
    }

    const GAE: GaeParams = GaeParams {
        gamma: 0.99,
        lambda: 0.95,
    };

    #[test]
    fn collect_is_deterministic() {
        let (policy, critic) = uniform_cartpole_policy();
        let run = || {
            let mut runner = EnvRunner::new(&EnvSpec::cartpole(), 4, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            collect(&policy, &critic, &mut runner, 16, GAE, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_policy_samples_balanced_actions() {
        let (policy, critic) = uniform_cartpole_policy();
        let mut runner = EnvRunner::new(&EnvSpec::cartpole(), 100, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = collect(&policy, &critic, &mut runner, 100, GAE, &mut rng).unwrap();
        let n = batch.len() as f64;
        let ones = batch.actions.iter().filter(|&&a| a == 1.0).count() as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((ones - n / 2.0).abs() < 3.0 * sigma, "{ones} of {n}");
        for lp in &batch.old_log_probs {
            assert!((lp.exp() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_shapes_and_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env = EnvSpec::pendulum();
        let policy = PolicyParams::init(&env, &[8], &mut rng).unwrap();
        let cspec = MlpSpec::new(3, vec![8], Activation::Tanh, true, 1).unwrap();
        let critic = MlpWeights::init_uniform(cspec, &mut rng).unwrap();
        let mut runner = EnvRunner::new(&env, 3, 5).unwrap();
        let b = collect(&policy, &critic, &mut runner, 10, GAE, &mut rng).unwrap();
        assert_eq!(b.len(), 30);
        assert_eq!(b.states.len(), 90);
        assert_eq!(b.actions.len(), 30);
        for f in [
            &b.old_log_probs,
            &b.rewards,
            &b.value_estimates,
            &b.advantages,
            &b.returns,
        ] {
            assert_eq!(f.len(), 30);
        }
        let mean = b.advantages.iter().sum::<f64>() / 30.0;
        assert!(mean.abs() < 1e-6);
        for k in 0..b.len() {
            let lp = crate::policy::policy_log_prob(&policy, b.state(k), b.action(k)).unwrap();
            assert!((lp - b.old_log_probs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_sample() {
        let (policy, critic) = uniform_cartpole_policy();
        let mut runner = EnvRunner::new(&EnvSpec::cartpole(), 2, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = collect(&policy, &critic, &mut runner, 5, GAE, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.csv");
        b.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("t,env,state_0"));
    }
}
