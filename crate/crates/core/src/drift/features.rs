use serde::{Deserialize, Serialize};

/// Smallest ratio fed to `ln`; anything below is clamped.
pub const R_MIN: f64 = 1e-8;

pub const N_FEATURES: usize = 8;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "1-r",
    "(1-r)^2",
    "(1-r)A",
    "(1-r)^2A",
    "log r",
    "(log r)^2",
    "(log r)A",
    "(log r)^2A",
];

/// Which of the eight drift inputs are fed to a learned drift network.
/// Serialised as eight booleans in feature order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[bool; N_FEATURES]", into = "[bool; N_FEATURES]")]
pub struct FeatureMask(u8);

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask(0xff);

    pub fn from_indices(indices: &[usize]) -> Self {
        FeatureMask(
            indices
                .iter()
                .filter(|&&i| i < N_FEATURES)
                .fold(0u8, |m, &i| m | (1 << i)),
        )
    }

    pub fn contains(self, i: usize) -> bool {
        i < N_FEATURES && self.0 & (1 << i) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn label(self) -> String {
        let names: Vec<_> = (0..N_FEATURES)
            .filter(|&i| self.contains(i))
            .map(|i| FEATURE_NAMES[i])
            .collect();
        names.join(" ")
    }
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl From<[bool; N_FEATURES]> for FeatureMask {
    fn from(flags: [bool; N_FEATURES]) -> Self {
        FeatureMask(
            flags
                .iter()
                .enumerate()
                .fold(0u8, |m, (i, &on)| if on { m | (1 << i) } else { m }),
        )
    }
}

impl From<FeatureMask> for [bool; N_FEATURES] {
    fn from(mask: FeatureMask) -> Self {
        std::array::from_fn(|i| mask.contains(i))
    }
}

/// Drift inputs at one `(r, A)` point, with their derivatives in `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; N_FEATURES],
    pub d_dr: [f64; N_FEATURES],
    /// Set when `r` was below [`R_MIN`] and got clamped.
    pub clamped: bool,
}

/// `[(1-r), (1-r)^2, (1-r)A, (1-r)^2 A, ln r, (ln r)^2, (ln r)A, (ln r)^2 A]`
/// with masked entries zeroed. Below the clamp the features are constant
/// in `r`, so their derivatives are zero there.
pub fn features(r: f64, advantage: f64, mask: FeatureMask) -> FeatureVector {
    let clamped = !(r >= R_MIN);
    let r = if clamped { R_MIN } else { r };
    let a = advantage;
    let u = 1.0 - r;
    let l = r.ln();
    let inv_r = 1.0 / r;
    let mut values = [u, u * u, u * a, u * u * a, l, l * l, l * a, l * l * a];
    let mut d_dr = if clamped {
        [0.0; N_FEATURES]
    } else {
        [
            -1.0,
            -2.0 * u,
            -a,
            -2.0 * u * a,
            inv_r,
            2.0 * l * inv_r,
            a * inv_r,
            2.0 * l * a * inv_r,
        ]
    };
    for i in 0..N_FEATURES {
        if !mask.contains(i) {
            values[i] = 0.0;
            d_dr[i] = 0.0;
        }
    }
    FeatureVector {
        values,
        d_dr,
        clamped,
    }
}
