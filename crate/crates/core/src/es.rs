//! Antithetic evolution strategies over learned-drift weights.
//!
//! Each generation draws `population_size / 2` Gaussian directions, scores
//! `phi +- sigma * eps` with a full inner training run, and takes an Adam
//! ascent step along the estimate
//! `1/(2 n sigma) * sum_i [F(phi + sigma eps_i) - F(phi - sigma eps_i)] eps_i`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{
    verify_drift, DriftSpec, FeatureMask, LearnedDrift, Tolerances, VerifyGrid, DEFAULT_EPSILON,
    DEFAULT_XI,
};
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{AdamState, MlpSpec, MlpWeights};
use crate::trainer::{train, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Drift-network architecture searched over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsMode {
    /// Small tanh net added onto the PPO drift, starting from zero weights.
    Residual,
    /// Two 256-unit ReLU layers, no PPO term, random initial weights.
    FromScratch,
}

impl EsMode {
    pub fn net_spec(self) -> MlpSpec {
        match self {
            EsMode::Residual => LearnedDrift::residual_spec(),
            EsMode::FromScratch => LearnedDrift::from_scratch_spec(),
        }
    }

    pub fn ppo_residual(self) -> bool {
        self == EsMode::Residual
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            EsMode::Residual => 0.003,
            EsMode::FromScratch => 0.006,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shaping {
    /// Raw fitness values.
    None,
    /// Centred ranks in `[-0.5, 0.5]`, ties sharing their mean rank.
    Rank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsConfig {
    pub population_size: usize,
    pub sigma_init: f64,
    pub sigma_decay: f64,
    pub sigma_limit: f64,
    pub n_generations: usize,
    pub outer_learning_rate: f64,
    /// Episodes used to score each final inner policy.
    pub eval_episodes: usize,
    pub mode: EsMode,
    pub feature_mask: FeatureMask,
    pub shaping: Shaping,
    /// Meta-task mixture; every member is trained on every env.
    pub envs: Vec<EnvId>,
    /// PPO runs per env behind the z-score baseline of a mixture.
    pub baseline_runs: usize,
    /// Inner-loop settings. `seed` is replaced by a per-generation seed
    /// shared by the whole population, and `gamma` and `eval_episodes` by the
    /// env's discount and the ES evaluation budget.
    pub inner: TrainConfig,
}

impl EsConfig {
    /// Desk-scale residual search on cart-pole.
    pub fn desk() -> Self {
        Self {
            population_size: 8,
            sigma_init: 0.04,
            sigma_decay: 0.999,
            sigma_limit: 0.01,
            n_generations: 20,
            outer_learning_rate: EsMode::Residual.default_learning_rate(),
            eval_episodes: 10,
            mode: EsMode::Residual,
            feature_mask: FeatureMask::ALL,
            shaping: Shaping::Rank,
            envs: vec![EnvId::Cartpole],
            baseline_runs: 3,
            inner: TrainConfig {
                total_timesteps: 100_000,
                ..TrainConfig::cartpole()
            },
        }
    }

    pub fn sigma_at(&self, generation: usize) -> f64 {
        sigma_schedule(
            self.sigma_init,
            self.sigma_decay,
            self.sigma_limit,
            generation,
        )
    }

    pub fn n_pairs(&self) -> usize {
        self.population_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.population_size < 2 || self.population_size % 2 != 0 {
            return bad(format!(
                "population_size must be even and >= 2, got {}",
                self.population_size
            ));
        }
        if !(self.sigma_init > 0.0 && self.sigma_limit > 0.0 && self.sigma_limit <= self.sigma_init)
        {
            return bad("need 0 < sigma_limit <= sigma_init".into());
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            return bad(format!("sigma_decay {} not in (0, 1]", self.sigma_decay));
        }
        if !(self.outer_learning_rate >= 0.0 && self.outer_learning_rate.is_finite()) {
            return bad("outer_learning_rate must be >= 0".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1".into());
        }
        if self.envs.is_empty() {
            return bad("envs must name at least one environment".into());
        }
        if self.envs.len() > 1 && self.baseline_runs < 2 {
            return bad("a mixture needs baseline_runs >= 2".into());
        }
        if self.feature_mask.is_empty() {
            return bad("feature mask selects no features".into());
        }
        for &id in &self.envs {
            self.inner_config_for(id).validate()?;
        }
        Ok(())
    }

    /// Inner config for one env, with the env's discount and the ES
    /// evaluation budget.
    pub fn inner_config_for(&self, id: EnvId) -> TrainConfig {
        TrainConfig {
            gamma: EnvSpec::default_for(id).gamma,
            eval_episodes: self.eval_episodes,
            ..self.inner.clone()
        }
    }

    /// The learned drift this config searches over, with weights `phi`.
    pub fn drift_for(&self, phi: &[f64]) -> Result<DriftSpec> {
        let weights = MlpWeights::from_flat(self.mode.net_spec(), phi.to_vec())?;
        Ok(DriftSpec::Learned(LearnedDrift {
            weights,
            ppo_residual: self.mode.ppo_residual(),
            epsilon: DEFAULT_EPSILON,
            xi: DEFAULT_XI,
            feature_mask: self.feature_mask,
        }))
    }

    pub fn param_count(&self) -> usize {
        self.mode.net_spec().param_count()
    }
}

/// `max(limit, init * decay^g)`
pub fn sigma_schedule(init: f64, decay: f64, limit: f64, generation: usize) -> f64 {
    let g = i32::try_from(generation).unwrap_or(i32::MAX);
    limit.max(init * decay.powi(g))
}

/// Standard-normal direction for one antithetic pair. Every
/// `(seed, generation, pair)` triple owns an independent ChaCha stream.
pub fn perturbation(seed: u64, generation: u64, pair: u64, dim: usize) -> Vec<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&generation.to_le_bytes());
    key[16..].copy_from_slice(b"antithetic-pair!");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(pair);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Centred ranks in `[-0.5, 0.5]`. Ties get their mean rank; a single
/// value maps to 0.
pub fn centred_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank / (n - 1) as f64 - 0.5;
        }
        i = j + 1;
    }
    ranks
}

/// Fitness of both members of one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFitness {
    pub pair: usize,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsEstimate {
    pub gradient: Vec<f64>,
    /// Pairs with a NaN fitness, left out of the estimate.
    pub dropped_pairs: usize,
    pub pairs: Vec<PairFitness>,
}

/// Combines pair fitnesses into the antithetic estimate. `directions[i]`
/// belongs to `pairs[i]`.
pub fn antithetic_estimate(
    directions: &[Vec<f64>],
    pairs: &[PairFitness],
    sigma: f64,
    shaping: Shaping,
) -> Result<EsEstimate> {
    if directions.len() != pairs.len() || pairs.is_empty() {
        return Err(Error::Config(format!(
            "{} directions for {} pairs",
            directions.len(),
            pairs.len()
        )));
    }
    let dim = directions[0].len();
    let kept: Vec<usize> = (0..pairs.len())
        .filter(|&i| !pairs[i].plus.is_nan() && !pairs[i].minus.is_nan())
        .collect();
    let dropped = pairs.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::NonFinite("every pair fitness is NaN".into()));
    }
    let raw: Vec<f64> = kept
        .iter()
        .flat_map(|&i| [pairs[i].plus, pairs[i].minus])
        .collect();
    let shaped = match shaping {
        Shaping::None => raw,
        Shaping::Rank => centred_ranks(&raw),
    };
    let mut gradient = vec![0.0; dim];
    let scale = 1.0 / (2.0 * kept.len() as f64 * sigma);
    for (j, &i) in kept.iter().enumerate() {
        let w = (shaped[2 * j] - shaped[2 * j + 1]) * scale;
        for (g, e) in gradient.iter_mut().zip(&directions[i]) {
            *g += w * e;
        }
    }
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} of {} ES pairs with NaN fitness",
            pairs.len()
        );
    }
    Ok(EsEstimate {
        gradient,
        dropped_pairs: dropped,
        pairs: pairs.to_vec(),
    })
}

/// Antithetic gradient of `fitness` at `phi` from `n_pairs` directions of
/// generation 0 under `seed`. Pairs are scored in parallel.
pub fn es_gradient<F>(
    phi: &[f64],
    fitness: F,
    n_pairs: usize,
    sigma: f64,
    seed: u64,
    shaping: Shaping,
) -> Result<EsEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(sigma > 0.0) || n_pairs == 0 {
        return Err(Error::Config(
            "es_gradient needs sigma > 0 and n_pairs >= 1".into(),
        ));
    }
    let directions: Vec<Vec<f64>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| perturbation(seed, 0, i, phi.len()))
        .collect();
    let pairs: Vec<PairFitness> = directions
        .par_iter()
        .enumerate()
        .map(|(i, eps)| {
            let plus: Vec<f64> = phi.iter().zip(eps).map(|(p, e)| p + sigma * e).collect();
            let minus: Vec<f64> = phi.iter().zip(eps).map(|(p, e)| p - sigma * e).collect();
            PairFitness {
                pair: i,
                plus: fitness(&plus),
                minus: fitness(&minus),
            }
        })
        .collect();
    antithetic_estimate(&directions, &pairs, sigma, shaping)
}

/// Mean and spread of plain PPO final returns on one env.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvBaseline {
    pub env: EnvId,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    /// Mean final return, or the mean z-score for a mixture. NaN if any
    /// inner run diverged.
    pub value: f64,
    pub per_env: Vec<Option<f64>>,
    pub diverged: bool,
}

/// Trains a fresh policy under `drift` on every env of the mixture and
/// scores the final policies.
pub fn meta_objective_for(
    drift: &DriftSpec,
    cfg: &EsConfig,
    baselines: &[EnvBaseline],
    seed: u64,
) -> Result<Fitness> {
    let mut per_env = Vec::with_capacity(cfg.envs.len());
    let mut diverged = false;
    for &id in &cfg.envs {
        let env = EnvSpec::default_for(id);
        let inner = TrainConfig {
            seed,
            ..cfg.inner_config_for(id)
        };
        let rec = train(&env, drift, &inner)?;
        diverged |= rec.diverged;
        per_env.push(rec.final_eval_return);
    }
    if diverged {
        return Ok(Fitness {
            value: f64::NAN,
            per_env,
            diverged,
        });
    }
    let returns: Vec<f64> = per_env.iter().map(|r| r.unwrap_or(f64::NAN)).collect();
    let value = if cfg.envs.len() == 1 {
        returns[0]
    } else {
        let z: Vec<f64> = cfg
            .envs
            .iter()
            .zip(&returns)
            .map(|(id, r)| {
                let b = baselines
                    .iter()
                    .find(|b| b.env == *id)
                    .ok_or_else(|| Error::Config(format!("no PPO baseline for {id}")))?;
                Ok((r - b.mean) / b.std.max(1e-8))
            })
            .collect::<Result<_>>()?;
        z.iter().sum::<f64>() / z.len() as f64
    };
    Ok(Fitness {
        value,
        per_env,
        diverged,
    })
}

/// [`meta_objective_for`] at weights `phi` of the configured architecture.
pub fn meta_objective(
    phi: &[f64],
    cfg: &EsConfig,
    baselines: &[EnvBaseline],
    seed: u64,
) -> Result<Fitness> {
    meta_objective_for(&cfg.drift_for(phi)?, cfg, baselines, seed)
}

/// PPO final returns over `cfg.baseline_runs` seeds per env; empty for a
/// single env, which is scored on raw returns.
pub fn ppo_baselines(cfg: &EsConfig, seed: u64) -> Result<Vec<EnvBaseline>> {
    if cfg.envs.len() < 2 {
        return Ok(Vec::new());
    }
    let ppo = DriftSpec::ppo(DEFAULT_EPSILON);
    cfg.envs
        .iter()
        .map(|&id| {
            let env = EnvSpec::default_for(id);
            let returns: Vec<f64> = (0..cfg.baseline_runs as u64)
                .into_par_iter()
                .map(|k| {
                    let inner = TrainConfig {
                        seed: inner_seed(seed, u64::MAX - k),
                        ..cfg.inner_config_for(id)
                    };
                    let rec = train(&env, &ppo, &inner)?;
                    rec.final_eval_return
                        .ok_or_else(|| Error::Diverged(format!("PPO baseline on {id}")))
                })
                .collect::<Result<_>>()?;
            let (mean, std) = mean_std(&returns);
            Ok(EnvBaseline { env: id, mean, std })
        })
        .collect()
}

/// Sample mean and `n - 1` standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Inner-training seed shared by the whole population of a generation.
pub fn inner_seed(seed: u64, generation: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(generation.wrapping_add(1));
    rand::Rng::gen(&mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub sigma: f64,
    pub mean_fitness: f64,
    pub max_fitness: f64,
    pub best_so_far: f64,
    pub diverged_members: usize,
    pub dropped_pairs: usize,
}

/// Everything needed to continue meta-training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsState {
    pub version: u32,
    pub config: EsConfig,
    pub seed: u64,
    /// Next generation to run. Perturbation and inner-training streams are
    /// pure functions of `(seed, generation)`, so this is the RNG state.
    pub generation: usize,
    pub phi: Vec<f64>,
    pub adam: AdamState,
    pub best_fitness: Option<f64>,
    pub best_phi: Vec<f64>,
    pub baselines: Vec<EnvBaseline>,
    pub history: Vec<GenerationStats>,
}

impl EsState {
    pub fn new(cfg: &EsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.mode.net_spec();
        let phi = match cfg.mode {
            EsMode::Residual => vec![0.0; spec.param_count()],
            EsMode::FromScratch => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX);
                MlpWeights::init_uniform(spec, &mut rng)?.into_flat()
            }
        };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            seed,
            generation: 0,
            adam: AdamState::new(phi.len(), cfg.outer_learning_rate),
            best_phi: phi.clone(),
            phi,
            best_fitness: None,
            baselines: ppo_baselines(cfg, seed)?,
            history: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.generation >= self.config.n_generations
    }

    /// Current centre of the search distribution as a drift.
    pub fn drift(&self) -> Result<DriftSpec> {
        self.config.drift_for(&self.phi)
    }

    pub fn best_drift(&self) -> Result<DriftSpec> {
        self.config.drift_for(&self.best_phi)
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let state: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                state.version
            )));
        }
        state.config.validate()?;
        if state.phi.len() != state.config.param_count() {
            return Err(Error::Dimension {
                context: "checkpoint phi",
                expected: state.config.param_count(),
                got: state.phi.len(),
            });
        }
        Ok(state)
    }

    /// Runs one generation: score all members in parallel, replace diverged
    /// members by the generation's worst fitness, then take an Adam ascent
    /// step.
    pub fn step(&mut self) -> Result<&GenerationStats> {
        let cfg = &self.config;
        let g = self.generation;
        let sigma = cfg.sigma_at(g);
        let n_pairs = cfg.n_pairs();
        let dim = self.phi.len();
        let directions: Vec<Vec<f64>> = (0..n_pairs as u64)
            .map(|i| perturbation(self.seed, g as u64, i, dim))
            .collect();
        let members: Vec<Vec<f64>> = directions
            .iter()
            .flat_map(|eps| {
                let s = [sigma, -sigma];
                s.map(|s| {
                    self.phi
                        .iter()
                        .zip(eps)
                        .map(|(p, e)| p + s * e)
                        .collect::<Vec<f64>>()
                })
            })
            .collect();
        let seed = inner_seed(self.seed, g as u64);
        let baselines = &self.baselines;
        let fits: Vec<Fitness> = members
            .par_iter()
            .map(|phi| meta_objective(phi, cfg, baselines, seed))
            .collect::<Result<_>>()?;

        let finite: Vec<f64> = fits
            .iter()
            .map(|f| f.value)
            .filter(|v| !v.is_nan())
            .collect();
        if finite.is_empty() {
            return Err(Error::Diverged(format!(
                "generation {g}: every member diverged"
            )));
        }
        let worst = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let diverged_members = fits.iter().filter(|f| f.value.is_nan()).count();
        let values: Vec<f64> = fits
            .iter()
            .map(|f| if f.value.is_nan() { worst } else { f.value })
            .collect();
        if diverged_members > 0 {
            log::warn!("generation {g}: {diverged_members} members diverged, penalised to {worst}");
        }

        let pairs: Vec<PairFitness> = (0..n_pairs)
            .map(|i| PairFitness {
                pair: i,
                plus: values[2 * i],
                minus: values[2 * i + 1],
            })
            .collect();
        let est = antithetic_estimate(&directions, &pairs, sigma, cfg.shaping)?;

        for (k, f) in fits.iter().enumerate() {
            if f.value.is_nan() {
                continue;
            }
            if self.best_fitness.map_or(true, |b| f.value > b) {
                self.best_fitness = Some(f.value);
                self.best_phi = members[k].clone();
            }
        }
        let ascent: Vec<f64> = est.gradient.iter().map(|g| -g).collect();
        self.adam.update(&mut self.phi, &ascent)?;

        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.history.push(GenerationStats {
            generation: g,
            sigma,
            mean_fitness: mean,
            max_fitness: max,
            best_so_far: self.best_fitness.unwrap_or(max),
            diverged_members,
            dropped_pairs: est.dropped_pairs,
        });
        self.generation += 1;
        log::info!(
            "generation {g}: sigma {sigma:.5} mean {mean:.3} max {max:.3} best {:.3}",
            self.best_fitness.unwrap_or(max)
        );
        Ok(self.history.last().expect("just pushed"))
    }

    /// Columns `generation, mean, max, best_so_far, sigma`.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["generation", "mean", "max", "best_so_far", "sigma"])?;
        for h in &self.history {
            w.write_record([
                h.generation.to_string(),
                format!("{:e}", h.mean_fitness),
                format!("{:e}", h.max_fitness),
                format!("{:e}", h.best_so_far),
                format!("{:e}", h.sigma),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of a meta-training call: final state plus the centre `phi` after
/// each generation run by this call.
#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub state: EsState,
    pub trajectory: Vec<Vec<f64>>,
}

/// Runs the remaining generations of `state`, persisting a checkpoint after
/// each one when `checkpoint` is given.
pub fn meta_continue(mut state: EsState, checkpoint: Option<&Path>) -> Result<MetaOutcome> {
    let mut trajectory = Vec::new();
    while !state.is_done() {
        state.step()?;
        trajectory.push(state.phi.clone());
        if let Some(path) = checkpoint {
            state.write_checkpoint(path)?;
        }
    }
    Ok(MetaOutcome { state, trajectory })
}

pub fn meta_train(cfg: &EsConfig, seed: u64, checkpoint: Option<&Path>) -> Result<MetaOutcome> {
    meta_continue(EsState::new(cfg, seed)?, checkpoint)
}

/// Validity report of a meta-trained drift on the standard grid.
pub fn verify_learned(state: &EsState) -> Result<bool> {
    let rep = verify_drift(
        &state.drift()?,
        &VerifyGrid::default(),
        &Tolerances::default(),
    )?;
    Ok(rep.valid)
}
