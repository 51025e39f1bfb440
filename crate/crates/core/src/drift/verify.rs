use serde::{Deserialize, Serialize};

use super::{DriftEvaluator, DriftSpec};
use crate::error::{Error, Result};

/// Rectangular `(r, A)` lattice, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub r_points: usize,
    pub a_max: f64,
    pub a_points: usize,
}

impl Default for VerifyGrid {
    fn default() -> Self {
        Self {
            r_min: 0.1,
            r_max: 3.0,
            r_points: 300,
            a_max: 3.0,
            a_points: 300,
        }
    }
}

impl VerifyGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_max > self.r_min && self.a_max > 0.0) {
            return Err(Error::Config(format!("bad verification grid {self:?}")));
        }
        if self.r_points < 2 || self.a_points < 2 {
            return Err(Error::Config(
                "verification grid needs >= 2 points per axis".into(),
            ));
        }
        Ok(())
    }

    pub fn r_values(&self) -> Vec<f64> {
        linspace(self.r_min, self.r_max, self.r_points)
    }

    pub fn a_values(&self) -> Vec<f64> {
        linspace(-self.a_max, self.a_max, self.a_points)
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Largest allowed `|f(1, A)|`.
    pub zero_at_identity: f64,
    /// Largest allowed `|df/dr|` at `r = 1`, by central differences.
    pub grad_at_identity: f64,
    /// Central-difference step for the identity-gradient probe. It must sit
    /// inside the `xi` dead zone of learned drifts for the probe to see it.
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            zero_at_identity: 1e-12,
            grad_at_identity: 1e-6,
            fd_step: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    NonNegative,
    ZeroAtIdentity,
    ZeroGradientAtIdentity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub r: f64,
    pub a: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub drift: String,
    pub valid: bool,
    pub grid: VerifyGrid,
    pub tolerances: Tolerances,
    pub min_value: f64,
    pub min_value_at: (f64, f64),
    pub max_abs_at_identity: f64,
    pub max_abs_at_identity_a: f64,
    pub max_abs_grad_at_identity: f64,
    pub max_abs_grad_at_identity_a: f64,
    pub clamp_count: u64,
    /// Up to [`MAX_VIOLATIONS`] offending points, in grid order.
    pub violations: Vec<Violation>,
    pub violation_count: usize,
}

pub const MAX_VIOLATIONS: usize = 32;

/// Checks non-negativity over the grid, and the value and central-difference
/// slope at `r = 1` for every grid advantage.
pub fn verify_drift(
    spec: &DriftSpec,
    grid: &VerifyGrid,
    tol: &Tolerances,
) -> Result<ValidityReport> {
    spec.validate()?;
    grid.validate()?;
    let mut ev = DriftEvaluator::new(spec);
    let rs = grid.r_values();
    let as_ = grid.a_values();
    let mut violations = Vec::new();
    let mut count = 0usize;
    let mut push = |v: Violation, violations: &mut Vec<Violation>| {
        count += 1;
        if violations.len() < MAX_VIOLATIONS {
            violations.push(v);
        }
    };

    let mut min_value = f64::INFINITY;
    let mut min_at = (rs[0], as_[0]);
    for &a in &as_ {
        for &r in &rs {
            let f = ev.eval(r, a).value;
            if f < min_value || f.is_nan() {
                min_value = f;
                min_at = (r, a);
            }
            if !(f >= 0.0) {
                push(
                    Violation {
                        check: Check::NonNegative,
                        r,
                        a,
                        value: f,
                    },
                    &mut violations,
                );
            }
        }
    }

    let h = tol.fd_step;
    let (mut max_id, mut max_id_a) = (0.0f64, as_[0]);
    let (mut max_grad, mut max_grad_a) = (0.0f64, as_[0]);
    for &a in &as_ {
        let f1 = ev.eval(1.0, a).value;
        if !(f1.abs() <= max_id) {
            max_id = f1.abs();
            max_id_a = a;
        }
        if !(f1.abs() <= tol.zero_at_identity) {
            push(
                Violation {
                    check: Check::ZeroAtIdentity,
                    r: 1.0,
                    a,
                    value: f1,
                },
                &mut violations,
            );
        }
        let g = (ev.eval(1.0 + h, a).value - ev.eval(1.0 - h, a).value) / (2.0 * h);
        if !(g.abs() <= max_grad) {
            max_grad = g.abs();
            max_grad_a = a;
        }
        if !(g.abs() <= tol.grad_at_identity) {
            push(
                Violation {
                    check: Check::ZeroGradientAtIdentity,
                    r: 1.0,
                    a,
                    value: g,
                },
                &mut violations,
            );
        }
    }

    Ok(ValidityReport {
        drift: spec.name().to_string(),
        valid: count == 0,
        grid: *grid,
        tolerances: *tol,
        min_value,
        min_value_at: min_at,
        max_abs_at_identity: max_id,
        max_abs_at_identity_a: max_id_a,
        max_abs_grad_at_identity: max_grad,
        max_abs_grad_at_identity_a: max_grad_a,
        clamp_count: ev.clamp_count(),
        violations,
        violation_count: count,
    })
}
