//! Joint self-supervised training of all hand heads.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gradcore::Tensor;
use crate::handmodel::{sample_within, HandSpec};
use crate::latentspace::{LatentError, LatentModel, DEFAULT_HIDDEN, DEFAULT_LATENT_DIM};
use crate::objective::{HandBatch, LossBreakdown, LossWeights, Objective, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {term} = {value}")]
    Diverged { step: usize, term: &'static str, value: f64 },
    #[error("optimizer state does not match parameter {index}: expected {expected:?}, got {got:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Loss term removed from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoReconstruction,
    NoDistance,
    NoDirection,
    NoRetargeting,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoReconstruction,
        Ablation::NoDistance,
        Ablation::NoDirection,
        Ablation::NoRetargeting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoReconstruction => "no-l1",
            Ablation::NoDistance => "no-l2-dist",
            Ablation::NoDirection => "no-l2-dir",
            Ablation::NoRetargeting => "no-l2",
        }
    }

    /// Applies the ablation to a base objective.
    pub fn objective(self, weights: LossWeights) -> Objective {
        let mut obj = Objective::new(weights);
        match self {
            Ablation::None => {}
            Ablation::NoReconstruction => obj.reconstruction = false,
            Ablation::NoDistance => obj.weights.lambda_dis = 0.0,
            Ablation::NoDirection => obj.weights.lambda_dir = 0.0,
            Ablation::NoRetargeting => {
                obj.weights.lambda_dis = 0.0;
                obj.weights.lambda_dir = 0.0;
            }
        }
        obj
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                format!("unknown ablation `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::Shape {
            index: params.len().min(grads.len()),
            expected: vec![params.len()],
            got: vec![grads.len(), state.m.len()],
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[index].len() != p.numel() || state.v[index].len() != p.numel() {
            return Err(TrainError::Shape {
                index,
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (index, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[index], &mut state.v[index]);
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_per_hand: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_per_hand: 256,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::None,
            seed: 0,
            checkpoint_every: 0,
            latent_dim: DEFAULT_LATENT_DIM,
            hidden_sizes: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.steps == 0 {
            return fail("steps must be positive");
        }
        if self.batch_per_hand == 0 {
            return fail("batch_per_hand must be positive");
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return fail("moment decays must lie in [0, 1)");
        }
        if !(a.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        self.ablation.objective(self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// One breakdown per executed step, measured before that step's update.
    pub history: Vec<LossBreakdown>,
    pub wall_clock: Duration,
    /// SHA-256 over every random draw, hex encoded.
    pub rng_digest: String,
}

impl TrainLog {
    pub fn records(&self) -> impl Iterator<Item = LogRecord> + '_ {
        self.history.iter().enumerate().map(|(step, b)| LogRecord {
            step,
            l1: b.l1,
            l2: b.l2,
            l3: b.l3,
            total: b.total,
        })
    }

    /// Line-delimited JSON, one record per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Random source for training: one stream for poses, one for noise, both
/// hashed into the trace digest.
struct Draws {
    poses: ChaCha8Rng,
    noise: ChaCha8Rng,
    digest: Sha256,
}

impl Draws {
    fn new(seed: u64) -> Self {
        let mut poses = ChaCha8Rng::seed_from_u64(seed);
        poses.set_stream(1);
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(2);
        Draws {
            poses,
            noise,
            digest: Sha256::new(),
        }
    }

    fn batch(&mut self, spec: &HandSpec, rows: usize, latent: usize) -> HandBatch {
        let limits = spec.actuated_limits();
        let poses: Vec<Vec<f64>> = (0..rows).map(|_| sample_within(&limits, &mut self.poses)).collect();
        let noise: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..latent).map(|_| self.noise.sample(StandardNormal)).collect())
            .collect();
        for v in poses.iter().chain(&noise).flatten() {
            self.digest.update(v.to_le_bytes());
        }
        HandBatch {
            hand: spec.name().to_string(),
            poses,
            noise: Some(noise),
        }
    }
}

/// Trains a fresh model on `specs`.
pub fn train(specs: &[HandSpec], config: &TrainConfig) -> Result<(LatentModel, TrainLog)> {
    train_with(specs, config, |_, _| Ok(()))
}

/// Like [`train`], calling `on_checkpoint(step, model)` every
/// `checkpoint_every` steps and after the final step.
pub fn train_with<F>(specs: &[HandSpec], config: &TrainConfig, mut on_checkpoint: F) -> Result<(LatentModel, TrainLog)>
where
    F: FnMut(usize, &LatentModel) -> Result<()>,
{
    config.validate()?;
    if specs.is_empty() {
        return Err(TrainError::Config("at least one hand is required".into()));
    }
    let model = LatentModel::new(specs, config.latent_dim, &config.hidden_sizes, config.seed)?;
    train_from(model, specs, config, &mut on_checkpoint)
}

/// Continues training an existing model.
pub fn train_from<F>(
    mut model: LatentModel,
    specs: &[HandSpec],
    config: &TrainConfig,
    on_checkpoint: &mut F,
) -> Result<(LatentModel, TrainLog)>
where
    F: FnMut(usize, &LatentModel) -> Result<()>,
{
    config.validate()?;
    model.check_specs(specs)?;
    let objective = config.objective();
    let started = Instant::now();
    let mut draws = Draws::new(config.seed);
    let mut state = AdamState::for_params(&model.parameters());
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<HandBatch> = specs
            .iter()
            .map(|s| draws.batch(s, config.batch_per_hand, model.latent_dim()))
            .collect();
        let (breakdown, grads) = objective.evaluate(&model, specs, &batch, true)?;
        for (term, value) in [
            ("l1", breakdown.l1),
            ("l2", breakdown.l2),
            ("l3", breakdown.l3),
            ("total", breakdown.total),
        ] {
            if !value.is_finite() {
                return Err(TrainError::Diverged { step, term, value });
            }
        }
        let grads = grads.expect("gradients requested");
        optimizer_step(&mut model.parameters_mut(), &grads, &mut state, &config.adam)?;
        history.push(breakdown);
        let done = step + 1;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.steps {
            on_checkpoint(done, &model)?;
        }
    }
    let digest = draws.digest.finalize();
    let rng_digest = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((
        model,
        TrainLog {
            history,
            wall_clock: started.elapsed(),
            rng_digest,
        },
    ))
}
