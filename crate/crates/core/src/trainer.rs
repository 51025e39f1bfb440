//! Inner-loop training: collect a batch, then maximise the sampled mirror
//! objective `mean[r A - f(r, A)]` over minibatched epochs of Adam steps.
//!
//! The policy and critic are separate tanh MLPs. Gradients of both losses are
//! clipped jointly by global norm before their Adam updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drift::{verify_drift, DriftEvaluator, DriftSpec, Tolerances, VerifyGrid};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{backward_into, forward_into, Activation, AdamState, MlpSpec, MlpWeights, Tape};
use crate::policy::{
    accumulate_entropy_grad, accumulate_log_prob_grad, entropy_from_head, log_prob_from_head,
    policy_entropy, sample_from_head, PolicyKind, PolicyParams,
};
use crate::rollout::{collect, Batch, EnvRunner, GaeParams};

/// Log-ratio clamp applied before `exp`.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_timesteps: usize,
    pub unroll_length: usize,
    pub n_envs: usize,
    pub n_minibatches: usize,
    pub n_update_epochs: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub value_loss_coeff: f64,
    pub entropy_bonus_coeff: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub seed: u64,
    /// Hidden widths shared by the policy and the critic.
    pub hidden_layers: Vec<usize>,
    pub eval_episodes: usize,
    /// Evaluate every this many iterations; 0 evaluates only the final policy.
    pub eval_interval: usize,
    pub deterministic_eval: bool,
}

impl TrainConfig {
    /// Desk-scale cart-pole settings, held fixed across drift variants.
    pub fn cartpole() -> Self {
        Self {
            total_timesteps: 200_000,
            unroll_length: 64,
            n_envs: 16,
            n_minibatches: 32,
            n_update_epochs: 4,
            learning_rate: 3e-4,
            grad_clip_norm: 0.5,
            value_loss_coeff: 0.5,
            entropy_bonus_coeff: 0.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            seed: 0,
            hidden_layers: vec![64, 64],
            eval_episodes: 10,
            eval_interval: 0,
            deterministic_eval: false,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            total_timesteps: 200_000,
            ..Self::cartpole()
        }
    }

    pub fn default_for(env: &EnvSpec) -> Self {
        match env.id {
            crate::envs::EnvId::Cartpole => Self::cartpole(),
            crate::envs::EnvId::Pendulum => Self::pendulum(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.unroll_length * self.n_envs
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.n_minibatches.max(1)
    }

    pub fn iterations(&self) -> usize {
        self.total_timesteps / self.batch_size().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.unroll_length == 0 || self.n_envs == 0 || self.n_minibatches == 0 {
            return bad("unroll_length, n_envs and n_minibatches must be >= 1".into());
        }
        if self.batch_size() < 2 {
            return bad("batch must hold at least 2 samples".into());
        }
        if self.batch_size() % self.n_minibatches != 0 {
            return bad(format!(
                "minibatch count {} does not divide batch size {}",
                self.n_minibatches,
                self.batch_size()
            ));
        }
        if self.iterations() == 0 {
            return bad("total_timesteps smaller than one batch".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} invalid", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} not in (0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} not in [0, 1]", self.gae_lambda));
        }
        if self.value_loss_coeff < 0.0 || self.entropy_bonus_coeff < 0.0 {
            return bad("loss coefficients must be >= 0".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1".into());
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return bad("hidden_layers must be non-empty and positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub timesteps: usize,
    /// Present on evaluation iterations.
    pub eval_return: Option<f64>,
    /// Mean return of training episodes that ended during collection.
    pub train_episode_return: Option<f64>,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub drift_mean: f64,
    /// `max |r - 1|` on the first minibatch of the first epoch.
    pub first_pass_max_ratio_dev: f64,
    /// Mean drift on the first minibatch of the first epoch.
    pub first_pass_drift_mean: f64,
    pub clamp_count: u64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: EnvSpec,
    pub drift: String,
    pub config: TrainConfig,
    pub iterations: Vec<IterationMetrics>,
    pub final_eval_return: Option<f64>,
    pub final_entropy: Option<f64>,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
    pub final_policy: PolicyParams,
}

impl RunRecord {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iteration",
            "timesteps",
            "eval_return",
            "train_episode_return",
            "entropy",
            "policy_loss",
            "value_loss",
            "drift_mean",
            "first_pass_max_ratio_dev",
            "first_pass_drift_mean",
            "clamp_count",
            "grad_norm",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for m in &self.iterations {
            w.write_record([
                m.iteration.to_string(),
                m.timesteps.to_string(),
                opt(m.eval_return),
                opt(m.train_episode_return),
                format!("{:e}", m.entropy),
                format!("{:e}", m.policy_loss),
                format!("{:e}", m.value_loss),
                format!("{:e}", m.drift_mean),
                format!("{:e}", m.first_pass_max_ratio_dev),
                format!("{:e}", m.first_pass_drift_mean),
                m.clamp_count.to_string(),
                format!("{:e}", m.grad_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-sample inputs of the surrogate loss.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub states: &'a [f64],
    pub actions: &'a [f64],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
}

impl<'a> Samples<'a> {
    pub fn from_batch(b: &'a Batch) -> Self {
        Self {
            states: &b.states,
            actions: &b.actions,
            old_log_probs: &b.old_log_probs,
            advantages: &b.advantages,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    /// `-mean[r A - f(r, A)] - c_ent * mean entropy`
    pub loss: f64,
    pub drift_mean: f64,
    pub max_ratio_dev: f64,
    pub entropy_mean: f64,
    pub clamp_count: u64,
}

/// Scratch buffers for one policy.
struct PolicyScratch {
    tape: Tape,
    head_grad: Vec<f64>,
}

impl PolicyScratch {
    fn new(policy: &PolicyParams) -> Self {
        Self {
            tape: Tape::new(policy.trunk.spec()),
            head_grad: vec![0.0; policy.kind.head_dim()],
        }
    }
}

/// Accumulates the surrogate loss over `indices` and, if `grad` is given,
/// adds its gradient w.r.t. `[trunk params, log_std]` into it.
fn surrogate_pass(
    policy: &PolicyParams,
    drift: &mut DriftEvaluator<'_>,
    samples: Samples<'_>,
    indices: &[usize],
    entropy_coeff: f64,
    scratch: &mut PolicyScratch,
    mut grad: Option<&mut [f64]>,
) -> SurrogateStats {
    let kind = policy.kind;
    let od = policy.obs_dim();
    let aw = kind.action_width();
    let n_trunk = policy.trunk.len();
    let inv_m = 1.0 / indices.len() as f64;
    let clamps_before = drift.clamp_count();
    let mut st = SurrogateStats::default();
    for &k in indices {
        let s = &samples.states[k * od..(k + 1) * od];
        let a = &samples.actions[k * aw..(k + 1) * aw];
        let adv = samples.advantages[k];
        forward_into(&policy.trunk, s, &mut scratch.tape);
        let head = scratch.tape.output();
        let logp = log_prob_from_head(kind, head, &policy.log_std, a);
        let delta = logp - samples.old_log_probs[k];
        let clamped = delta.abs() > LOG_RATIO_CLAMP;
        let r = delta.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
        let p = drift.eval(r, adv);
        st.loss -= (r * adv - p.value) * inv_m;
        st.drift_mean += p.value * inv_m;
        st.max_ratio_dev = st.max_ratio_dev.max((r - 1.0).abs());
        if entropy_coeff > 0.0 {
            let h = entropy_from_head(kind, head, &policy.log_std);
            st.loss -= entropy_coeff * h * inv_m;
            st.entropy_mean += h * inv_m;
        }
        if let Some(g) = grad.as_deref_mut() {
            let dlogp = if clamped {
                0.0
            } else {
                -(adv - p.dr_train) * r * inv_m
            };
            scratch.head_grad.iter_mut().for_each(|v| *v = 0.0);
            let (gt, gls) = g.split_at_mut(n_trunk);
            accumulate_log_prob_grad(
                kind,
                head,
                &policy.log_std,
                a,
                dlogp,
                &mut scratch.head_grad,
                gls,
            );
            if entropy_coeff > 0.0 {
                accumulate_entropy_grad(
                    kind,
                    scratch.tape.output(),
                    -entropy_coeff * inv_m,
                    &mut scratch.head_grad,
                    gls,
                );
            }
            let hg = std::mem::take(&mut scratch.head_grad);
            backward_into(&policy.trunk, &mut scratch.tape, &hg, Some(gt), None);
            scratch.head_grad = hg;
        }
    }
    st.clamp_count = drift.clamp_count() - clamps_before;
    st
}

/// Surrogate loss `-mean[r A - f(r, A)]` over all samples (entropy bonus
/// off).
pub fn surrogate_loss(policy: &PolicyParams, drift: &DriftSpec, samples: Samples<'_>) -> f64 {
    let n = samples.advantages.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut ev = DriftEvaluator::new(drift);
    let mut scratch = PolicyScratch::new(policy);
    surrogate_pass(policy, &mut ev, samples, &idx, 0.0, &mut scratch, None).loss
}

/// Loss and its gradient w.r.t. the flat policy parameters
/// (`trunk` followed by `log_std`).
pub fn surrogate_loss_grad(
    policy: &PolicyParams,
    drift: &DriftSpec,
    samples: Samples<'_>,
) -> (f64, Vec<f64>) {
    let n = samples.advantages.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut ev = DriftEvaluator::new(drift);
    let mut scratch = PolicyScratch::new(policy);
    let mut g = vec![0.0; policy.param_count()];
    let st = surrogate_pass(
        policy,
        &mut ev,
        samples,
        &idx,
        0.0,
        &mut scratch,
        Some(&mut g),
    );
    (st.loss, g)
}

/// `mean (V(s) - target)^2` and, if `grad` is given, `coeff` times its
/// gradient added in.
fn value_pass(
    critic: &MlpWeights,
    states: &[f64],
    targets: &[f64],
    indices: &[usize],
    coeff: f64,
    tape: &mut Tape,
    grad: Option<&mut [f64]>,
) -> f64 {
    let od = critic.spec().input_dim;
    let inv_m = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for &k in indices {
        forward_into(critic, &states[k * od..(k + 1) * od], tape);
        let err = tape.output()[0] - targets[k];
        loss += err * err * inv_m;
        if let Some(g) = grad.as_deref_mut() {
            backward_into(critic, tape, &[2.0 * err * inv_m * coeff], Some(g), None);
        }
    }
    loss
}

/// Undiscounted mean return over `n_episodes`, one per environment instance.
pub fn evaluate(
    policy: &PolicyParams,
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let (mut state, mut obs) = crate::envs::reset(env, n_episodes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let kind = policy.kind;
    let od = env.obs_dim();
    let aw = kind.action_width();
    let mut tape = Tape::new(policy.trunk.spec());
    let mut returns: Vec<Option<f64>> = vec![None; n_episodes];
    let mut acts = vec![0.0; n_episodes * aw];
    let mut discrete = vec![0usize; n_episodes];
    while returns.iter().any(Option::is_none) {
        for i in 0..n_episodes {
            if returns[i].is_some() {
                continue;
            }
            forward_into(&policy.trunk, &obs[i * od..(i + 1) * od], &mut tape);
            let a = &mut acts[i * aw..(i + 1) * aw];
            sample_from_head(
                kind,
                tape.output(),
                &policy.log_std,
                deterministic,
                &mut rng,
                a,
            );
            if let PolicyKind::Categorical { .. } = kind {
                discrete[i] = a[0] as usize;
            }
        }
        let out = match kind {
            PolicyKind::Categorical { .. } => {
                state.step(crate::envs::Actions::Discrete(&discrete))?
            }
            PolicyKind::Gaussian { .. } => state.step(crate::envs::Actions::Continuous(&acts))?,
        };
        for (i, ret) in out.completed {
            returns[i].get_or_insert(ret);
        }
        obs = out.observations;
    }
    Ok(returns.iter().map(|r| r.unwrap_or(0.0)).sum::<f64>() / n_episodes as f64)
}

pub fn critic_spec(env: &EnvSpec, hidden: &[usize]) -> Result<MlpSpec> {
    MlpSpec::new(env.obs_dim(), hidden.to_vec(), Activation::Tanh, true, 1)
}

/// Seeded stream `k` of the run's RNG family.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Hooks for observing training from the outside.
pub trait TrainObserver {
    /// Called after every collected batch, before any update.
    fn on_batch(&mut self, _iteration: usize, _batch: &Batch) {}
}

impl TrainObserver for () {}

pub fn train(env: &EnvSpec, drift: &DriftSpec, cfg: &TrainConfig) -> Result<RunRecord> {
    train_observed(env, drift, cfg, &mut ())
}

/// Runs `cfg.iterations()` collect-then-update iterations. Configuration
/// and drift-validity problems are errors; numerical divergence during
/// training yields a partial record with `diverged` set.
pub fn train_observed(
    env: &EnvSpec,
    drift: &DriftSpec,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<RunRecord> {
    env.validate()?;
    cfg.validate()?;
    if (cfg.gamma - env.gamma).abs() > 0.0 {
        return Err(Error::Config(format!(
            "train gamma {} differs from env gamma {}",
            cfg.gamma, env.gamma
        )));
    }
    let report = verify_drift(drift, &VerifyGrid::default(), &Tolerances::default())?;
    if !report.valid {
        return Err(Error::InvalidDrift(format!(
            "'{}' failed validity checks: {:?}",
            drift.name(),
            report.violations.first()
        )));
    }

    let mut init_rng = stream(cfg.seed, 0);
    let mut sample_rng = stream(cfg.seed, 1);
    let mut shuffle_rng = stream(cfg.seed, 2);
    let env_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(3);
    let eval_seed_base = cfg.seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(7);

    let mut policy = PolicyParams::init(env, &cfg.hidden_layers, &mut init_rng)?;
    let mut critic =
        MlpWeights::init_uniform(critic_spec(env, &cfg.hidden_layers)?, &mut init_rng)?;
    let mut policy_adam = AdamState::new(policy.param_count(), cfg.learning_rate);
    let mut critic_adam = AdamState::new(critic.len(), cfg.learning_rate);
    let mut runner = EnvRunner::new(env, cfg.n_envs, env_seed)?;
    let gae = GaeParams {
        gamma: cfg.gamma,
        lambda: cfg.gae_lambda,
    };

    let mut evaluator = DriftEvaluator::new(drift);
    let mut pscratch = PolicyScratch::new(&policy);
    let mut vtape = Tape::new(critic.spec());
    let mut pgrad = vec![0.0; policy.param_count()];
    let mut vgrad = vec![0.0; critic.len()];
    let mut pflat = policy.to_flat();

    let mb = cfg.minibatch_size();
    let mut order: Vec<usize> = (0..cfg.batch_size()).collect();
    let mut iterations = Vec::with_capacity(cfg.iterations());
    let mut divergence: Option<String> = None;

    'outer: for it in 0..cfg.iterations() {
        let batch = match collect(
            &policy,
            &critic,
            &mut runner,
            cfg.unroll_length,
            gae,
            &mut sample_rng,
        ) {
            Ok(b) => b,
            Err(Error::NonFinite(msg)) => {
                divergence = Some(format!("iteration {it}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        observer.on_batch(it, &batch);
        let samples = Samples::from_batch(&batch);
        let clamps_before = evaluator.clamp_count();

        let mut first_dev = 0.0;
        let mut first_drift = 0.0;
        let (mut sum_pl, mut sum_vl, mut sum_drift, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);
        let mut n_steps = 0usize;
        for epoch in 0..cfg.n_update_epochs {
            order.shuffle(&mut shuffle_rng);
            for (m, idx) in order.chunks_exact(mb).enumerate() {
                pgrad.iter_mut().for_each(|g| *g = 0.0);
                vgrad.iter_mut().for_each(|g| *g = 0.0);
                let st = surrogate_pass(
                    &policy,
                    &mut evaluator,
                    samples,
                    idx,
                    cfg.entropy_bonus_coeff,
                    &mut pscratch,
                    Some(&mut pgrad),
                );
                let vl = value_pass(
                    &critic,
                    &batch.states,
                    &batch.returns,
                    idx,
                    cfg.value_loss_coeff,
                    &mut vtape,
                    Some(&mut vgrad),
                );
                if epoch == 0 && m == 0 {
                    first_dev = st.max_ratio_dev;
                    first_drift = st.drift_mean;
                }
                let loss = st.loss + cfg.value_loss_coeff * vl;
                if !loss.is_finite() {
                    divergence = Some(format!("iteration {it}: non-finite loss {loss}"));
                    break 'outer;
                }
                let norm = pgrad
                    .iter()
                    .chain(&vgrad)
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip_norm {
                    let s = cfg.grad_clip_norm / norm;
                    pgrad
                        .iter_mut()
                        .chain(vgrad.iter_mut())
                        .for_each(|g| *g *= s);
                }
                if let Err(e) = policy_adam
                    .update(&mut pflat, &pgrad)
                    .and_then(|_| critic_adam.update(critic.as_mut_slice(), &vgrad))
                {
                    divergence = Some(format!("iteration {it}: {e}"));
                    break 'outer;
                }
                policy.set_flat(&pflat)?;
                sum_pl += st.loss;
                sum_vl += vl;
                sum_drift += st.drift_mean;
                sum_norm += norm;
                n_steps += 1;
            }
        }

        let entropy = policy_entropy(&policy, &batch.states)?;
        let eval_now = cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0;
        let eval_return = if eval_now {
            Some(evaluate(
                &policy,
                env,
                cfg.eval_episodes,
                eval_seed_base.wrapping_add(it as u64),
                cfg.deterministic_eval,
            )?)
        } else {
            None
        };
        let denom = n_steps.max(1) as f64;
        let train_episode_return = if batch.completed_returns.is_empty() {
            None
        } else {
            Some(batch.completed_returns.iter().sum::<f64>() / batch.completed_returns.len() as f64)
        };
        iterations.push(IterationMetrics {
            iteration: it,
            timesteps: (it + 1) * cfg.batch_size(),
            eval_return,
            train_episode_return,
            entropy,
            policy_loss: sum_pl / denom,
            value_loss: sum_vl / denom,
            drift_mean: sum_drift / denom,
            first_pass_max_ratio_dev: first_dev,
            first_pass_drift_mean: first_drift,
            clamp_count: evaluator.clamp_count() - clamps_before,
            grad_norm: sum_norm / denom,
        });
        if !entropy.is_finite() {
            divergence = Some(format!("iteration {it}: non-finite entropy"));
            break;
        }
    }

    let diverged = divergence.is_some();
    let (final_eval_return, final_entropy) = if diverged {
        (None, None)
    } else {
        let ret = evaluate(
            &policy,
            env,
            cfg.eval_episodes,
            eval_seed_base.wrapping_sub(1),
            cfg.deterministic_eval,
        )?;
        let ent = iterations.last().map(|m| m.entropy);
        (Some(ret), ent)
    };
    Ok(RunRecord {
        env: *env,
        drift: drift.name().to_string(),
        config: cfg.clone(),
        iterations,
        final_eval_return,
        final_entropy,
        diverged,
        divergence_reason: divergence,
        final_policy: policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            total_timesteps: 512,
            unroll_length: 16,
            n_envs: 4,
            n_minibatches: 4,
            n_update_epochs: 2,
            hidden_layers: vec![8],
            eval_episodes: 2,
            ..TrainConfig::cartpole()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::cartpole().validate().is_ok());
        let bad = TrainConfig {
            n_minibatches: 3,
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            total_timesteps: 10,
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::cartpole().iterations(), 195);
    }

    #[test]
    fn train_is_deterministic() {
        let env = EnvSpec::cartpole();
        let a = train(&env, &DriftSpec::dpo(), &tiny_cfg()).unwrap();
        let b = train(&env, &DriftSpec::dpo(), &tiny_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations.len(), 8);
        assert!(!a.diverged);
    }

    #[test]
    fn zero_epochs_leave_policy_unchanged() {
        let env = EnvSpec::cartpole();
        let cfg = TrainConfig {
            n_update_epochs: 0,
            ..tiny_cfg()
        };
        let rec = train(&env, &DriftSpec::ppo(0.2), &cfg).unwrap();
        let mut rng = stream(cfg.seed, 0);
        let init = PolicyParams::init(&env, &cfg.hidden_layers, &mut rng).unwrap();
        assert_eq!(rec.final_policy, init);
    }

    #[test]
    fn first_pass_is_at_identity() {
        let env = EnvSpec::pendulum();
        let cfg = TrainConfig {
            total_timesteps: 1024,
            ..tiny_cfg()
        };
        for drift in [DriftSpec::ppo(0.2), DriftSpec::dpo()] {
            let rec = train(&env, &drift, &cfg).unwrap();
            for m in &rec.iterations {
                assert!(m.first_pass_max_ratio_dev <= 1e-12);
                assert_eq!(m.first_pass_drift_mean, 0.0);
            }
        }
    }

    #[test]
    fn invalid_drift_is_rejected() {
        let err = train(
            &EnvSpec::cartpole(),
            &DriftSpec::Constant { value: 1.0 },
            &tiny_cfg(),
        );
        assert!(matches!(err, Err(Error::InvalidDrift(_))));
    }

    #[test]
    fn ppo_loss_is_negative_clipped_objective() {
        let env = EnvSpec::cartpole();
        let mut rng = stream(5, 0);
        let policy = PolicyParams::init(&env, &[4], &mut rng).unwrap();
        let states: Vec<f64> = (0..40).map(|i| ((i * 7) as f64).sin() * 0.1).collect();
        let actions: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let old: Vec<f64> = (0..10).map(|i| (0.4 + 0.02 * i as f64).ln()).collect();
        let adv: Vec<f64> = (0..10).map(|i| i as f64 / 3.0 - 1.5).collect();
        let samples = Samples {
            states: &states,
            actions: &actions,
            old_log_probs: &old,
            advantages: &adv,
        };
        let loss = surrogate_loss(&policy, &DriftSpec::ppo(0.2), samples);
        let mut want = 0.0;
        for k in 0..10 {
            let lp = crate::policy::policy_log_prob(
                &policy,
                &states[4 * k..4 * k + 4],
                &actions[k..k + 1],
            )
            .unwrap();
            let r = (lp - old[k]).exp();
            want -= (r * adv[k]).min(r.clamp(0.8, 1.2) * adv[k]) / 10.0;
        }
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_reproducible() {
        let env = EnvSpec::cartpole();
        let mut rng = stream(1, 0);
        let p = PolicyParams::init(&env, &[8], &mut rng).unwrap();
        let a = evaluate(&p, &env, 5, 9, false).unwrap();
        assert_eq!(a, evaluate(&p, &env, 5, 9, false).unwrap());
        assert!(evaluate(&p, &env, 0, 9, false).is_err());
    }

    #[test]
    fn record_files_round_trip() {
        let rec = train(&EnvSpec::cartpole(), &DriftSpec::ppo(0.2), &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("run.json");
        rec.write_json(&json).unwrap();
        assert_eq!(RunRecord::read_json(&json).unwrap(), rec);
        let csv = dir.path().join("run.csv");
        rec.write_metrics_csv(&csv).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), rec.iterations.len() + 1);
    }
}
