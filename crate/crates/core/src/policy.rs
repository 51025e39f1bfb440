//! Stochastic policies: a tanh MLP trunk emitting categorical logits or
//! diagonal-Gaussian means, plus a state-independent log-std for the
//! Gaussian case.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{ActionSpace, EnvSpec};
use crate::error::{check_dim, Error, Result};
use crate::nn::{forward_into, Activation, MlpSpec, MlpWeights, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PolicyKind {
    Categorical { n_actions: usize },
    Gaussian { action_dim: usize },
}

impl PolicyKind {
    pub fn for_env(env: &EnvSpec) -> Self {
        match env.action_space() {
            ActionSpace::Discrete(n) => PolicyKind::Categorical { n_actions: n },
            ActionSpace::Box { dim, .. } => PolicyKind::Gaussian { action_dim: dim },
        }
    }

    /// Width of the trunk output.
    pub fn head_dim(&self) -> usize {
        match *self {
            PolicyKind::Categorical { n_actions } => n_actions,
            PolicyKind::Gaussian { action_dim } => action_dim,
        }
    }

    /// Number of reals stored per action.
    pub fn action_width(&self) -> usize {
        match *self {
            PolicyKind::Categorical { .. } => 1,
            PolicyKind::Gaussian { action_dim } => action_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub kind: PolicyKind,
    pub trunk: MlpWeights,
    /// Empty for categorical policies.
    pub log_std: Vec<f64>,
}

impl PolicyParams {
    pub fn new(kind: PolicyKind, trunk: MlpWeights, log_std: Vec<f64>) -> Result<Self> {
        check_dim("policy head", kind.head_dim(), trunk.spec().output_dim)?;
        let expected_std = match kind {
            PolicyKind::Categorical { .. } => 0,
            PolicyKind::Gaussian { action_dim } => action_dim,
        };
        check_dim("policy log-std", expected_std, log_std.len())?;
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log-std".into()));
        }
        Ok(Self {
            kind,
            trunk,
            log_std,
        })
    }

    /// Uniform-initialised tanh trunk with the given hidden widths; log-std
    /// starts at zero.
    pub fn init<R: Rng + ?Sized>(env: &EnvSpec, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let kind = PolicyKind::for_env(env);
        let spec = MlpSpec::new(
            env.obs_dim(),
            hidden.to_vec(),
            Activation::Tanh,
            true,
            kind.head_dim(),
        )?;
        let trunk = MlpWeights::init_uniform(spec, rng)?;
        let log_std = match kind {
            PolicyKind::Categorical { .. } => Vec::new(),
            PolicyKind::Gaussian { action_dim } => vec![0.0; action_dim],
        };
        Self::new(kind, trunk, log_std)
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.spec().input_dim
    }

    /// Trunk parameters followed by the log-std entries.
    pub fn param_count(&self) -> usize {
        self.trunk.len() + self.log_std.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.trunk.as_slice().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("policy flat parameters", self.param_count(), flat.len())?;
        let n = self.trunk.len();
        self.trunk.as_mut_slice().copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
        Ok(())
    }
}

/// Log-density of `action` given the trunk output.
pub fn log_prob_from_head(kind: PolicyKind, head: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    match kind {
        PolicyKind::Categorical { .. } => {
            let a = action[0] as usize;
            head[a] - log_sum_exp(head)
        }
        PolicyKind::Gaussian { .. } => head
            .iter()
            .zip(log_std)
            .zip(action)
            .map(|((mu, ls), a)| {
                let z = (a - mu) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum(),
    }
}

pub fn entropy_from_head(kind: PolicyKind, head: &[f64], log_std: &[f64]) -> f64 {
    match kind {
        PolicyKind::Categorical { .. } => {
            let lse = log_sum_exp(head);
            -head
                .iter()
                .map(|l| {
                    let lp = l - lse;
                    lp.exp() * lp
                })
                .sum::<f64>()
        }
        PolicyKind::Gaussian { .. } => log_std.iter().map(|ls| 0.5 * (LN_2PI + 1.0) + ls).sum(),
    }
}

/// Adds `scale * d log pi(a) / d head` into `head_grad` and
/// `scale * d log pi(a) / d log_std` into `log_std_grad`.
pub fn accumulate_log_prob_grad(
    kind: PolicyKind,
    head: &[f64],
    log_std: &[f64],
    action: &[f64],
    scale: f64,
    head_grad: &mut [f64],
    log_std_grad: &mut [f64],
) {
    match kind {
        PolicyKind::Categorical { .. } => {
            let a = action[0] as usize;
            let lse = log_sum_exp(head);
            for (j, (g, l)) in head_grad.iter_mut().zip(head).enumerate() {
                let p = (l - lse).exp();
                let ind = if j == a { 1.0 } else { 0.0 };
                *g += scale * (ind - p);
            }
        }
        PolicyKind::Gaussian { .. } => {
            for k in 0..head.len() {
                let inv_var = (-2.0 * log_std[k]).exp();
                let diff = action[k] - head[k];
                head_grad[k] += scale * diff * inv_var;
                log_std_grad[k] += scale * (diff * diff * inv_var - 1.0);
            }
        }
    }
}

/// Adds `scale * d H / d head` and `scale * d H / d log_std`.
pub fn accumulate_entropy_grad(
    kind: PolicyKind,
    head: &[f64],
    scale: f64,
    head_grad: &mut [f64],
    log_std_grad: &mut [f64],
) {
    match kind {
        PolicyKind::Categorical { .. } => {
            let lse = log_sum_exp(head);
            let h = entropy_from_head(kind, head, &[]);
            for (g, l) in head_grad.iter_mut().zip(head) {
                let lp = l - lse;
                *g -= scale * lp.exp() * (lp + h);
            }
        }
        PolicyKind::Gaussian { .. } => {
            for g in log_std_grad.iter_mut() {
                *g += scale;
            }
        }
    }
}

/// Draws an action into `out`; `deterministic` picks the mode.
pub fn sample_from_head<R: Rng + ?Sized>(
    kind: PolicyKind,
    head: &[f64],
    log_std: &[f64],
    deterministic: bool,
    rng: &mut R,
    out: &mut [f64],
) {
    match kind {
        PolicyKind::Categorical { .. } => {
            let choice = if deterministic {
                argmax(head)
            } else {
                let lse = log_sum_exp(head);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut choice = head.len() - 1;
                for (j, l) in head.iter().enumerate() {
                    acc += (l - lse).exp();
                    if u < acc {
                        choice = j;
                        break;
                    }
                }
                choice
            };
            out[0] = choice as f64;
        }
        PolicyKind::Gaussian { .. } => {
            for k in 0..head.len() {
                out[k] = if deterministic {
                    head[k]
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    head[k] + log_std[k].exp() * z
                };
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn policy_log_prob(policy: &PolicyParams, state: &[f64], action: &[f64]) -> Result<f64> {
    check_dim("policy state", policy.obs_dim(), state.len())?;
    check_dim("policy action", policy.kind.action_width(), action.len())?;
    if let PolicyKind::Categorical { n_actions } = policy.kind {
        let a = action[0];
        if a < 0.0 || a.fract() != 0.0 || a as usize >= n_actions {
            return Err(Error::Config(format!("invalid categorical action {a}")));
        }
    }
    let mut tape = Tape::new(policy.trunk.spec());
    forward_into(&policy.trunk, state, &mut tape);
    Ok(log_prob_from_head(
        policy.kind,
        tape.output(),
        &policy.log_std,
        action,
    ))
}

/// Mean policy entropy over row-major `states`.
pub fn policy_entropy(policy: &PolicyParams, states: &[f64]) -> Result<f64> {
    let d = policy.obs_dim();
    if states.is_empty() || states.len() % d != 0 {
        return Err(Error::Dimension {
            context: "policy entropy states",
            expected: d,
            got: states.len(),
        });
    }
    let mut tape = Tape::new(policy.trunk.spec());
    let mut total = 0.0;
    let n = states.len() / d;
    for s in states.chunks_exact(d) {
        forward_into(&policy.trunk, s, &mut tape);
        total += entropy_from_head(policy.kind, tape.output(), &policy.log_std);
    }
    Ok(total / n as f64)
}
