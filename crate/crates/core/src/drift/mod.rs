//! Drift functions: the per-sample penalty `f(r, A)` subtracted from the
//! surrogate `r * A`.
//!
//! A valid drift is non-negative, vanishes at `r = 1` and has zero
//! `r`-derivative there. Three families are provided:
//!
//! - PPO-clip: `ReLU((r - clip(r, 1 - eps, 1 + eps)) * A)`
//! - DPO: `ReLU((r-1)A - alpha tanh((r-1)A / alpha))` for `A >= 0` and
//!   `ReLU(ln(r) A - beta tanh(ln(r) A / beta))` for `A < 0`
//! - learned: `ReLU(net(x) - xi [+ ReLU((r - clip(r)) A)])` where `x` are the
//!   eight [`features`] and `net` is bias-free, so `net(0) = 0`.
//!
//! Derivatives in `r` are exact. At a ReLU kink [`drift_dr`] reports the
//! right-hand derivative and sets a flag; the trainer instead uses the
//! subgradient `0` whenever a ReLU argument is exactly zero.

mod features;
mod heatmap;
mod verify;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_into, forward_into, Activation, MlpSpec, MlpWeights, Tape};

pub use features::{features, FeatureMask, FeatureVector, FEATURE_NAMES, N_FEATURES, R_MIN};
pub use heatmap::{export_heatmap, Heatmap, HeatmapRequest, SLICE_ADVANTAGES};
pub use verify::{verify_drift, Tolerances, ValidityReport, VerifyGrid, Violation};

pub const DEFAULT_XI: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DPO_ALPHA: f64 = 2.0;
pub const DPO_BETA: f64 = 0.6;

/// Learned drift network plus its output transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedDrift {
    pub weights: MlpWeights,
    /// Adds the PPO drift inside the output ReLU.
    pub ppo_residual: bool,
    pub epsilon: f64,
    pub xi: f64,
    #[serde(default)]
    pub feature_mask: FeatureMask,
}

impl LearnedDrift {
    /// One bias-free tanh hidden layer of 128 units.
    pub fn residual_spec() -> MlpSpec {
        MlpSpec {
            input_dim: N_FEATURES,
            layer_widths: vec![128],
            activation: Activation::Tanh,
            use_bias: false,
            output_dim: 1,
        }
    }

    /// Two bias-free ReLU hidden layers of 256 units.
    pub fn from_scratch_spec() -> MlpSpec {
        MlpSpec {
            input_dim: N_FEATURES,
            layer_widths: vec![256, 256],
            activation: Activation::Relu,
            use_bias: false,
            output_dim: 1,
        }
    }

    pub fn new(weights: MlpWeights, ppo_residual: bool) -> Self {
        Self {
            weights,
            ppo_residual,
            epsilon: DEFAULT_EPSILON,
            xi: DEFAULT_XI,
            feature_mask: FeatureMask::ALL,
        }
    }

    pub fn init_uniform<R: Rng + ?Sized>(
        spec: MlpSpec,
        ppo_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self::new(
            MlpWeights::init_uniform(spec, rng)?,
            ppo_residual,
        ))
    }

    /// Same architecture and settings with a new flat weight vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Ok(Self {
            weights: MlpWeights::from_flat(self.weights.spec().clone(), params)?,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.weights.spec();
        spec.validate()?;
        if spec.use_bias {
            return Err(Error::Config(
                "learned drift network must be bias-free".into(),
            ));
        }
        if spec.input_dim != N_FEATURES || spec.output_dim != 1 {
            return Err(Error::Config(format!(
                "learned drift network must map {N_FEATURES} features to 1 output"
            )));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.feature_mask.is_empty() {
            return Err(Error::Config("feature mask selects no features".into()));
        }
        if self.weights.as_slice().iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("learned drift weights".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    PpoClip {
        epsilon: f64,
    },
    Dpo {
        alpha: f64,
        beta: f64,
    },
    Learned(LearnedDrift),
    /// `f = value` everywhere. Invalid unless `value == 0`; exists as a
    /// counterexample for the validity checks.
    Constant {
        value: f64,
    },
}

impl DriftSpec {
    pub fn ppo(epsilon: f64) -> Self {
        DriftSpec::PpoClip { epsilon }
    }

    pub fn dpo() -> Self {
        DriftSpec::Dpo {
            alpha: DPO_ALPHA,
            beta: DPO_BETA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriftSpec::PpoClip { .. } => "ppo",
            DriftSpec::Dpo { .. } => "dpo",
            DriftSpec::Learned(_) => "learned",
            DriftSpec::Constant { .. } => "constant",
        }
    }

    /// Dead-zone width of the output ReLU, zero for the closed forms.
    pub fn xi(&self) -> f64 {
        match self {
            DriftSpec::Learned(l) => l.xi,
            _ => 0.0,
        }
    }

    /// Parameter checks only; drift validity is [`verify_drift`]'s job.
    pub fn validate(&self) -> Result<()> {
        match self {
            DriftSpec::PpoClip { epsilon } => {
                if !(*epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::Config(format!(
                        "ppo epsilon must be > 0, got {epsilon}"
                    )));
                }
            }
            DriftSpec::Dpo { alpha, beta } => {
                if !(*alpha > 0.0 && *beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return Err(Error::Config(format!(
                        "dpo alpha and beta must be > 0, got {alpha}, {beta}"
                    )));
                }
            }
            DriftSpec::Learned(l) => l.validate()?,
            DriftSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::NonFinite("constant drift value".into()));
                }
            }
        }
        Ok(())
    }
}

/// Drift value and `r`-derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftPoint {
    pub value: f64,
    /// Right-hand derivative in `r`.
    pub dr: f64,
    /// Derivative with every ReLU taken as `1[x > 0]`; used for training.
    pub dr_train: f64,
    /// Left and right derivatives differ at this point.
    pub kink: bool,
    /// `r` was clamped to [`R_MIN`] before taking logs.
    pub clamped: bool,
}

/// One-sided derivatives of a scalar function of `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Sided {
    left: f64,
    right: f64,
    train: f64,
}

impl Sided {
    fn smooth(d: f64) -> Self {
        Sided {
            left: d,
            right: d,
            train: d,
        }
    }

    fn add(self, o: Sided) -> Sided {
        Sided {
            left: self.left + o.left,
            right: self.right + o.right,
            train: self.train + o.train,
        }
    }
}

/// `(ReLU(g), derivatives)` from the pre-activation and its derivatives.
fn relu_sided(g: f64, d: Sided) -> (f64, Sided) {
    if g > 0.0 {
        (g, d)
    } else if g < 0.0 {
        (0.0, Sided::smooth(0.0))
    } else {
        (
            0.0,
            Sided {
                left: d.left.min(0.0),
                right: d.right.max(0.0),
                train: 0.0,
            },
        )
    }
}

/// Pre-activation `(r - clip(r, 1-eps, 1+eps)) * A` of the PPO drift.
fn ppo_pre(r: f64, a: f64, eps: f64) -> (f64, Sided) {
    let lo = 1.0 - eps;
    let hi = 1.0 + eps;
    let g = (r - r.clamp(lo, hi)) * a;
    let right = if r >= hi || r < lo { a } else { 0.0 };
    let left = if r > hi || r <= lo { a } else { 0.0 };
    let train = if r > hi || r < lo { a } else { 0.0 };
    (g, Sided { left, right, train })
}

/// Reusable evaluator; holds scratch space for the learned network.
#[derive(Clone, Debug)]
pub struct DriftEvaluator<'a> {
    spec: &'a DriftSpec,
    tape: Option<Tape>,
    dx: [f64; N_FEATURES],
    clamp_count: u64,
}

impl<'a> DriftEvaluator<'a> {
    pub fn new(spec: &'a DriftSpec) -> Self {
        let tape = match spec {
            DriftSpec::Learned(l) => Some(Tape::new(l.weights.spec())),
            _ => None,
        };
        Self {
            spec,
            tape,
            dx: [0.0; N_FEATURES],
            clamp_count: 0,
        }
    }

    pub fn spec(&self) -> &DriftSpec {
        self.spec
    }

    /// Number of evaluations whose ratio fell below [`R_MIN`].
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    pub fn eval(&mut self, r: f64, a: f64) -> DriftPoint {
        let clamped = !(r >= R_MIN);
        if clamped {
            self.clamp_count += 1;
        }
        let (value, d) = match self.spec {
            DriftSpec::PpoClip { epsilon } => {
                let (g, d) = ppo_pre(r, a, *epsilon);
                relu_sided(g, d)
            }
            DriftSpec::Dpo { alpha, beta } => {
                let rc = if clamped { R_MIN } else { r };
                let (scale, u, du) = if a >= 0.0 {
                    (*alpha, (rc - 1.0) * a, a)
                } else {
                    (*beta, rc.ln() * a, if clamped { 0.0 } else { a / rc })
                };
                let t = (u / scale).tanh();
                let g = u - scale * t;
                // d/dr [u - s tanh(u/s)] = u' (1 - sech^2(u/s)) = u' tanh^2(u/s)
                relu_sided(g, Sided::smooth(du * t * t))
            }
            DriftSpec::Learned(l) => {
                let fv = features(r, a, l.feature_mask);
                let tape = self.tape.as_mut().expect("learned drift has a tape");
                forward_into(&l.weights, &fv.values, tape);
                let net = tape.output()[0];
                backward_into(&l.weights, tape, &[1.0], None, Some(&mut self.dx));
                let dnet: f64 = self.dx.iter().zip(&fv.d_dr).map(|(g, d)| g * d).sum();
                let mut g = net - l.xi;
                let mut d = Sided::smooth(dnet);
                if l.ppo_residual {
                    let (p, dp) = ppo_pre(r, a, l.epsilon);
                    let (rp, drp) = relu_sided(p, dp);
                    g += rp;
                    d = d.add(drp);
                }
                relu_sided(g, d)
            }
            DriftSpec::Constant { value } => (*value, Sided::smooth(0.0)),
        };
        DriftPoint {
            value,
            dr: d.right,
            dr_train: d.train,
            kink: d.left != d.right,
            clamped,
        }
    }
}

/// Drift value `f(r, A)`.
pub fn drift_eval(spec: &DriftSpec, r: f64, advantage: f64) -> f64 {
    DriftEvaluator::new(spec).eval(r, advantage).value
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftDerivative {
    /// `df/dr`, right-hand at kinks.
    pub value: f64,
    pub kink: bool,
}

pub fn drift_dr(spec: &DriftSpec, r: f64, advantage: f64) -> DriftDerivative {
    let p = DriftEvaluator::new(spec).eval(r, advantage);
    DriftDerivative {
        value: p.dr,
        kink: p.kink,
    }
}

/// Per-sample mirror objective `r * A - f(r, A)`.
pub fn objective_per_sample(spec: &DriftSpec, r: f64, advantage: f64) -> f64 {
    r * advantage - drift_eval(spec, r, advantage)
}
