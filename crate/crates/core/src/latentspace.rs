//! Per-hand encoder/decoder heads over a shared Gaussian latent space.
//!
//! Every hand gets an MLP encoder mapping its normalized joint vector to
//! `(μ, log σ²)` and an MLP decoder mapping a latent code back to normalized
//! joint values. Hidden layers use `tanh`; output layers are linear.
//! Joint values are normalized to `[-1, 1]` by the hand's joint limits.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tape, Tensor, Var};
use crate::handmodel::{HandSpec, JointPose};
use crate::io::write_atomic;

pub const DEFAULT_LATENT_DIM: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 64];
pub const CHECKPOINT_VERSION: u32 = 1;
const WEIGHT_ENCODING: &str = "f64-le-base64";

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("no head for hand `{0}`")]
    UnknownHand(String),
    #[error("hand `{hand}` expects {expected} values, got {got}")]
    Dimension {
        hand: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint format_version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match hand specs: {0}")]
    HandMismatch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T, E = LatentError> = std::result::Result<T, E>;

/// Dense layer `y = x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R, zero_bias: bool) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weights = Tensor::new(vec![inputs, outputs], draw(inputs * outputs)).expect("layer shape");
        let bias = if zero_bias {
            Tensor::zeros(vec![1, outputs])
        } else {
            Tensor::new(vec![1, outputs], draw(outputs)).expect("layer shape")
        };
        Dense { weights, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Encoder and decoder stacks for one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hand: String,
    pub limits: Vec<(f64, f64)>,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

impl Head {
    pub fn dof(&self) -> usize {
        self.limits.len()
    }

    /// Maps joint values into `[-1, 1]`.
    pub fn normalize(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(&self.limits)
            .map(|(&v, &(lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.limits)
            .map(|(&v, &(lo, hi))| lo + (v + 1.0) * 0.5 * (hi - lo))
            .collect()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dof() {
            return Err(LatentError::Dimension {
                hand: self.hand.clone(),
                expected: self.dof(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Posterior parameters and the latent sample drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentCode {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    latent_dim: usize,
    hidden_sizes: Vec<usize>,
    heads: Vec<Head>,
}

/// Parameter handles of one head after [`LatentModel::bind`].
#[derive(Debug, Clone)]
pub struct BoundHead {
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
    scale: Var,
    shift: Var,
    latent_dim: usize,
}

/// A model recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    heads: Vec<BoundHead>,
    params: Vec<Var>,
}

impl BoundModel {
    pub fn head(&self, index: usize) -> &BoundHead {
        &self.heads[index]
    }

    /// Parameter vars in [`LatentModel::parameters`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

fn mlp(tape: &mut Tape, layers: &[(Var, Var)], input: Var) -> Result<Var, GradError> {
    let mut x = input;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let h = tape.matmul(x, w)?;
        let shape = tape.value(h)?.shape().to_vec();
        let b = tape.broadcast(b, &shape)?;
        x = tape.add(h, b)?;
        if i + 1 < layers.len() {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

impl BoundHead {
    /// `[batch, dof]` normalized joints to `(μ, log σ²)`, each `[batch, latent]`.
    pub fn encode(&self, tape: &mut Tape, normalized: Var) -> Result<(Var, Var), GradError> {
        let out = mlp(tape, &self.encoder, normalized)?;
        let mu = tape.slice(out, 1, 0, self.latent_dim)?;
        let log_var = tape.slice(out, 1, self.latent_dim, 2 * self.latent_dim)?;
        Ok((mu, log_var))
    }

    /// `z = μ + exp(½ log σ²) ⊙ ε` for a constant `ε`.
    pub fn reparameterize(&self, tape: &mut Tape, mu: Var, log_var: Var, noise: Var) -> Result<Var, GradError> {
        let half = tape.scale(log_var, 0.5)?;
        let sigma = tape.exp(half)?;
        let spread = tape.mul(sigma, noise)?;
        tape.add(mu, spread)
    }

    /// Raw decoder output in normalized units.
    pub fn decode_normalized(&self, tape: &mut Tape, z: Var) -> Result<Var, GradError> {
        mlp(tape, &self.decoder, z)
    }

    /// Decoder output mapped to radians, without clamping.
    pub fn decode_joints(&self, tape: &mut Tape, z: Var) -> Result<Var, GradError> {
        let x = self.decode_normalized(tape, z)?;
        self.to_joints(tape, x)
    }

    fn to_joints(&self, tape: &mut Tape, x: Var) -> Result<Var, GradError> {
        let shape = tape.value(x)?.shape().to_vec();
        let scale = tape.broadcast(self.scale, &shape)?;
        let shift = tape.broadcast(self.shift, &shape)?;
        let scaled = tape.mul(x, scale)?;
        tape.add(scaled, shift)
    }
}

impl LatentModel {
    /// Fresh model with one head per spec, seeded uniform fan-in init and a
    /// zero bias on each decoder output layer.
    pub fn new(specs: &[HandSpec], latent_dim: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        let hands: Vec<(String, Vec<(f64, f64)>)> = specs
            .iter()
            .map(|s| (s.name().to_string(), s.actuated_limits()))
            .collect();
        Self::from_limits(&hands, latent_dim, hidden_sizes, seed)
    }

    pub fn from_limits(
        hands: &[(String, Vec<(f64, f64)>)],
        latent_dim: usize,
        hidden_sizes: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || hidden_sizes.contains(&0) {
            return Err(LatentError::Architecture(format!(
                "latent_dim {latent_dim} and hidden sizes {hidden_sizes:?} must be positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut heads: Vec<Head> = Vec::with_capacity(hands.len());
        for (name, limits) in hands {
            if heads.iter().any(|h| &h.hand == name) {
                return Err(LatentError::Architecture(format!("hand `{name}` listed twice")));
            }
            if limits.is_empty() || limits.iter().any(|&(lo, hi)| !(hi > lo)) {
                return Err(LatentError::Architecture(format!("hand `{name}` needs non-empty, increasing limits")));
            }
            let dof = limits.len();
            let mut enc_sizes = vec![dof];
            enc_sizes.extend_from_slice(hidden_sizes);
            enc_sizes.push(2 * latent_dim);
            let mut dec_sizes = vec![latent_dim];
            dec_sizes.extend(hidden_sizes.iter().rev());
            dec_sizes.push(dof);
            let encoder = enc_sizes
                .windows(2)
                .map(|w| Dense::uniform(w[0], w[1], &mut rng, false))
                .collect();
            let n = dec_sizes.len() - 1;
            let decoder = dec_sizes
                .windows(2)
                .enumerate()
                .map(|(i, w)| Dense::uniform(w[0], w[1], &mut rng, i + 1 == n))
                .collect();
            heads.push(Head {
                hand: name.clone(),
                limits: limits.clone(),
                encoder,
                decoder,
            });
        }
        Ok(LatentModel {
            latent_dim,
            hidden_sizes: hidden_sizes.to_vec(),
            heads,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn hand_names(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.hand.as_str()).collect()
    }

    pub fn head_index(&self, hand: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.hand == hand)
            .ok_or_else(|| LatentError::UnknownHand(hand.to_string()))
    }

    pub fn head(&self, hand: &str) -> Result<&Head> {
        Ok(&self.heads[self.head_index(hand)?])
    }

    pub fn head_mut(&mut self, hand: &str) -> Result<&mut Head> {
        let i = self.head_index(hand)?;
        Ok(&mut self.heads[i])
    }

    /// Every weight and bias tensor, head by head, encoder before decoder.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.heads
            .iter()
            .flat_map(|h| h.encoder.iter().chain(&h.decoder))
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.encoder.iter_mut().chain(h.decoder.iter_mut()))
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Records all parameters on `tape`; `trainable` registers them for
    /// gradients, otherwise they are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            params.push(v);
            v
        };
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let encoder = h
                .encoder
                .iter()
                .map(|l| (leaf(tape, &l.weights), leaf(tape, &l.bias)))
                .collect();
            let decoder = h
                .decoder
                .iter()
                .map(|l| (leaf(tape, &l.weights), leaf(tape, &l.bias)))
                .collect();
            let scale: Vec<f64> = h.limits.iter().map(|&(lo, hi)| 0.5 * (hi - lo)).collect();
            let shift: Vec<f64> = h.limits.iter().map(|&(lo, hi)| lo + 0.5 * (hi - lo)).collect();
            let dof = h.dof();
            heads.push(BoundHead {
                encoder,
                decoder,
                scale: tape.constant(Tensor::new(vec![1, dof], scale).expect("limit row")),
                shift: tape.constant(Tensor::new(vec![1, dof], shift).expect("limit row")),
                latent_dim: self.latent_dim,
            });
        }
        BoundModel { heads, params }
    }

    /// Encodes a batch of joint vectors. With `rng` the code is sampled by
    /// reparameterization, otherwise `z = μ`.
    pub fn encode_batch(
        &self,
        hand: &str,
        poses: &[Vec<f64>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<LatentCode>> {
        let noise = rng.map(|rng| {
            (0..poses.len())
                .map(|_| (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect::<Vec<Vec<f64>>>()
        });
        self.encode_with_noise(hand, poses, noise.as_deref())
    }

    /// Encodes with caller-supplied standard normal draws (`None` gives `z = μ`).
    pub fn encode_with_noise(
        &self,
        hand: &str,
        poses: &[Vec<f64>],
        noise: Option<&[Vec<f64>]>,
    ) -> Result<Vec<LatentCode>> {
        let index = self.head_index(hand)?;
        let head = &self.heads[index];
        for p in poses {
            head.check(p.len())?;
        }
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind_head(&mut tape, index);
        let normalized: Vec<Vec<f64>> = poses.iter().map(|p| head.normalize(p)).collect();
        let x = tape.constant(Tensor::from_rows(&normalized)?);
        let (mu, log_var) = bound.encode(&mut tape, x)?;
        let mu_rows = tape.value(mu)?.to_rows();
        let lv_rows = tape.value(log_var)?.to_rows();
        let z_rows = match noise {
            None => mu_rows.clone(),
            Some(eps) => {
                if eps.len() != poses.len() || eps.iter().any(|e| e.len() != self.latent_dim) {
                    return Err(LatentError::Dimension {
                        hand: hand.to_string(),
                        expected: self.latent_dim,
                        got: eps.first().map_or(0, Vec::len),
                    });
                }
                let eps = tape.constant(Tensor::from_rows(eps)?);
                let z = bound.reparameterize(&mut tape, mu, log_var, eps)?;
                tape.value(z)?.to_rows()
            }
        };
        Ok(z_rows
            .into_iter()
            .zip(mu_rows)
            .zip(lv_rows)
            .map(|((z, mu), log_var)| LatentCode { z, mu, log_var })
            .collect())
    }

    pub fn encode(&self, hand: &str, pose: &JointPose, rng: Option<&mut dyn RngCore>) -> Result<LatentCode> {
        if pose.hand != hand {
            return Err(LatentError::HandMismatch(format!(
                "pose belongs to `{}`, not `{hand}`",
                pose.hand
            )));
        }
        let mut codes = self.encode_batch(hand, std::slice::from_ref(&pose.values), rng)?;
        Ok(codes.remove(0))
    }

    /// Decodes latent vectors to joint values clamped to the hand's limits.
    pub fn decode_batch(&self, hand: &str, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let index = self.head_index(hand)?;
        if let Some(bad) = latents.iter().find(|z| z.len() != self.latent_dim) {
            return Err(LatentError::Dimension {
                hand: hand.to_string(),
                expected: self.latent_dim,
                got: bad.len(),
            });
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let head = &self.heads[index];
        let mut tape = Tape::new();
        let bound = self.bind_head(&mut tape, index);
        let z = tape.constant(Tensor::from_rows(latents)?);
        let out = bound.decode_normalized(&mut tape, z)?;
        Ok(tape
            .value(out)?
            .to_rows()
            .into_iter()
            .map(|x| clamp_to(&head.denormalize(&x), &head.limits))
            .collect())
    }

    pub fn decode(&self, hand: &str, code: &LatentCode) -> Result<JointPose> {
        let mut rows = self.decode_batch(hand, std::slice::from_ref(&code.z))?;
        Ok(JointPose {
            hand: hand.to_string(),
            values: rows.remove(0),
        })
    }

    /// Deterministic encode on `source` followed by decode on `target`.
    pub fn cross_decode_batch(&self, source: &str, poses: &[Vec<f64>], target: &str) -> Result<Vec<Vec<f64>>> {
        self.head_index(target)?;
        let codes = self.encode_batch(source, poses, None)?;
        let z: Vec<Vec<f64>> = codes.into_iter().map(|c| c.z).collect();
        self.decode_batch(target, &z)
    }

    pub fn cross_decode(&self, source: &str, pose: &JointPose, target: &str) -> Result<JointPose> {
        let code = self.encode(source, pose, None)?;
        self.decode(target, &code)
    }

    fn bind_head(&self, tape: &mut Tape, index: usize) -> BoundHead {
        // Binding a single head avoids copying every other head onto the tape.
        let single = LatentModel {
            latent_dim: self.latent_dim,
            hidden_sizes: self.hidden_sizes.clone(),
            heads: vec![self.heads[index].clone()],
        };
        single.bind(tape, false).heads.remove(0)
    }

    /// Fails unless every spec has a head with matching dimension and limits.
    pub fn check_specs(&self, specs: &[HandSpec]) -> Result<()> {
        for spec in specs {
            let head = self
                .head(spec.name())
                .map_err(|_| LatentError::HandMismatch(format!("no head for hand `{}`", spec.name())))?;
            if head.limits != spec.actuated_limits() {
                return Err(LatentError::HandMismatch(format!(
                    "hand `{}` joint limits differ from the checkpoint",
                    spec.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_VERSION,
            weight_encoding: WEIGHT_ENCODING.to_string(),
            activation: "tanh".to_string(),
            latent_dim: self.latent_dim,
            hidden_sizes: self.hidden_sizes.clone(),
            hands: self
                .heads
                .iter()
                .map(|h| HandDoc {
                    name: h.hand.clone(),
                    d_h: h.dof(),
                    joint_limits: h.limits.iter().map(|&(lo, hi)| [lo, hi]).collect(),
                    encoder_layers: h.encoder.iter().map(LayerDoc::from_dense).collect(),
                    decoder_layers: h.decoder.iter().map(LayerDoc::from_dense).collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LatentError::Corrupt(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| LatentError::Corrupt("missing format_version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(LatentError::Version {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let doc: CheckpointDoc = serde_json::from_value(value).map_err(|e| LatentError::Corrupt(e.to_string()))?;
        if doc.weight_encoding != WEIGHT_ENCODING {
            return Err(LatentError::Corrupt(format!("unknown weight encoding `{}`", doc.weight_encoding)));
        }
        if doc.activation != "tanh" {
            return Err(LatentError::Corrupt(format!("unknown activation `{}`", doc.activation)));
        }
        let latent_dim = doc.latent_dim;
        let heads = doc
            .hands
            .into_iter()
            .map(|h| {
                if h.joint_limits.len() != h.d_h {
                    return Err(LatentError::Corrupt(format!("hand `{}` limit count differs from d_h", h.name)));
                }
                let encoder = h.encoder_layers.iter().map(LayerDoc::to_dense).collect::<Result<Vec<_>>>()?;
                let decoder = h.decoder_layers.iter().map(LayerDoc::to_dense).collect::<Result<Vec<_>>>()?;
                let head = Head {
                    hand: h.name,
                    limits: h.joint_limits.iter().map(|l| (l[0], l[1])).collect(),
                    encoder,
                    decoder,
                };
                check_head_shapes(&head, latent_dim, &doc.hidden_sizes)?;
                Ok(head)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentModel {
            latent_dim,
            hidden_sizes: doc.hidden_sizes,
            heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, self.to_checkpoint_string().as_bytes()).map_err(|source| LatentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LatentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint_str(&text)
    }
}

fn clamp_to(values: &[f64], limits: &[(f64, f64)]) -> Vec<f64> {
    values.iter().zip(limits).map(|(&v, &(lo, hi))| v.clamp(lo, hi)).collect()
}

fn check_head_shapes(head: &Head, latent_dim: usize, hidden: &[usize]) -> Result<()> {
    let shapes = |layers: &[Dense]| -> Vec<(usize, usize)> { layers.iter().map(|l| (l.inputs(), l.outputs())).collect() };
    let chain = |sizes: &[usize]| -> Vec<(usize, usize)> { sizes.windows(2).map(|w| (w[0], w[1])).collect() };
    let mut enc = vec![head.dof()];
    enc.extend_from_slice(hidden);
    enc.push(2 * latent_dim);
    let mut dec = vec![latent_dim];
    dec.extend(hidden.iter().rev());
    dec.push(head.dof());
    if shapes(&head.encoder) != chain(&enc) || shapes(&head.decoder) != chain(&dec) {
        return Err(LatentError::Corrupt(format!(
            "layer shapes of hand `{}` do not match latent_dim {latent_dim} and hidden sizes {hidden:?}",
            head.hand
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    weight_encoding: String,
    activation: String,
    latent_dim: usize,
    hidden_sizes: Vec<usize>,
    hands: Vec<HandDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandDoc {
    name: String,
    d_h: usize,
    joint_limits: Vec<[f64; 2]>,
    encoder_layers: Vec<LayerDoc>,
    decoder_layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    weights: String,
    bias: String,
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| LatentError::Corrupt(e.to_string()))?;
    if bytes.len() != expected * 8 {
        return Err(LatentError::Corrupt(format!(
            "expected {expected} weights, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl LayerDoc {
    fn from_dense(layer: &Dense) -> Self {
        LayerDoc {
            rows: layer.inputs(),
            cols: layer.outputs(),
            weights: encode_f64s(layer.weights.data()),
            bias: encode_f64s(layer.bias.data()),
        }
    }

    fn to_dense(&self) -> Result<Dense> {
        let weights = decode_f64s(&self.weights, self.rows * self.cols)?;
        let bias = decode_f64s(&self.bias, self.cols)?;
        Ok(Dense {
            weights: Tensor::new(vec![self.rows, self.cols], weights)?,
            bias: Tensor::new(vec![1, self.cols], bias)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> Vec<(String, Vec<(f64, f64)>)> {
        vec![
            ("a".to_string(), vec![(0.0, 1.0), (-1.0, 1.0), (-0.5, 2.0)]),
            ("b".to_string(), vec![(0.0, 1.5), (-0.3, 0.3)]),
        ]
    }

    fn model() -> LatentModel {
        LatentModel::from_limits(&limits(), 4, &[8, 6], 11).unwrap()
    }

    #[test]
    fn layer_shapes() {
        let m = model();
        let a = m.head("a").unwrap();
        assert_eq!(a.encoder.last().unwrap().outputs(), 8);
        assert_eq!(a.decoder.last().unwrap().outputs(), 3);
        assert_eq!(a.decoder[0].inputs(), 4);
        assert!(a.decoder.last().unwrap().bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(m.head("b").unwrap().decoder.last().unwrap().outputs(), 2);
    }

    #[test]
    fn deterministic_encode_returns_mean() {
        let m = model();
        let code = m.encode_batch("a", &[vec![0.2, 0.1, 1.0]], None).unwrap().remove(0);
        assert_eq!(code.z, code.mu);
        let again = m.encode_batch("a", &[vec![0.2, 0.1, 1.0]], None).unwrap().remove(0);
        assert_eq!(code, again);
    }

    #[test]
    fn unit_variance_sample_adds_noise() {
        let mut m = model();
        // zero the log-variance half of the output layer
        let last = m.head_mut("a").unwrap().encoder.last_mut().unwrap();
        let cols = last.outputs();
        for r in 0..last.inputs() {
            for c in 4..cols {
                last.weights.data_mut()[r * cols + c] = 0.0;
            }
        }
        for c in 4..cols {
            last.bias.data_mut()[c] = 0.0;
        }
        let eps = vec![vec![0.5, -1.0, 2.0, 0.25]];
        let code = m.encode_with_noise("a", &[vec![0.2, 0.1, 1.0]], Some(&eps)).unwrap().remove(0);
        assert!(code.log_var.iter().all(|&v| v == 0.0));
        for k in 0..4 {
            assert_eq!(code.z[k], code.mu[k] + eps[0][k]);
        }
    }

    #[test]
    fn zero_output_weights_give_bias_mean() {
        let mut m = model();
        let last = m.head_mut("b").unwrap().encoder.last_mut().unwrap();
        last.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let bias = last.bias.data()[..4].to_vec();
        for pose in [vec![0.0, 0.0], vec![1.5, 0.3], vec![0.7, -0.2]] {
            let code = m.encode_batch("b", &[pose], None).unwrap().remove(0);
            assert_eq!(code.mu, bias);
        }
    }

    #[test]
    fn decode_clamps_to_limits() {
        let mut m = LatentModel::from_limits(&[("c".to_string(), vec![(0.0, 1.0)])], 2, &[3], 0).unwrap();
        let last = m.head_mut("c").unwrap().decoder.last_mut().unwrap();
        last.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias.data_mut()[0] = 1.5;
        let q = m.decode_batch("c", &[vec![0.3, -0.1]]).unwrap();
        assert_eq!(q, vec![vec![1.0]]);
        last_set(&mut m, 0.0);
        assert_eq!(m.decode_batch("c", &[vec![0.3, -0.1]]).unwrap(), vec![vec![0.5]]);
    }

    fn last_set(m: &mut LatentModel, bias: f64) {
        m.head_mut("c").unwrap().decoder.last_mut().unwrap().bias.data_mut()[0] = bias;
    }

    #[test]
    fn cross_decode_same_hand_is_reconstruction() {
        let m = model();
        let q = vec![0.3, 0.4, 0.1];
        let code = m.encode_batch("a", std::slice::from_ref(&q), None).unwrap().remove(0);
        let recon = m.decode_batch("a", &[code.z]).unwrap();
        assert_eq!(m.cross_decode_batch("a", &[q], "a").unwrap(), recon);
    }

    #[test]
    fn unknown_hand_and_dimension_errors() {
        let m = model();
        assert!(matches!(m.encode_batch("zz", &[vec![0.0]], None), Err(LatentError::UnknownHand(_))));
        assert!(matches!(m.encode_batch("a", &[vec![0.0]], None), Err(LatentError::Dimension { .. })));
        assert!(matches!(m.decode_batch("zz", &[vec![0.0; 4]]), Err(LatentError::UnknownHand(_))));
        assert!(matches!(m.cross_decode_batch("a", &[vec![0.0; 3]], "zz"), Err(LatentError::UnknownHand(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_version_gate() {
        let m = model();
        let text = m.to_checkpoint_string();
        let loaded = LatentModel::from_checkpoint_str(&text).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.to_checkpoint_string(), text);

        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            LatentModel::from_checkpoint_str(&bumped),
            Err(LatentError::Version { found: 2, .. })
        ));
        assert!(matches!(LatentModel::from_checkpoint_str("{"), Err(LatentError::Corrupt(_))));
        let truncated = text.replacen("\"rows\": 3", "\"rows\": 4", 1);
        assert!(matches!(LatentModel::from_checkpoint_str(&truncated), Err(LatentError::Corrupt(_))));
    }

    #[test]
    fn head_isolation() {
        let m = model();
        let mut changed = m.clone();
        changed.head_mut("a").unwrap().decoder[0].weights.data_mut()[0] += 1.0;
        changed.head_mut("a").unwrap().encoder[0].bias.data_mut()[0] -= 0.5;
        let q = vec![vec![0.5, 0.1]];
        assert_eq!(m.encode_batch("b", &q, None).unwrap(), changed.encode_batch("b", &q, None).unwrap());
        let z = vec![vec![0.1, 0.2, -0.3, 0.4]];
        assert_eq!(m.decode_batch("b", &z).unwrap(), changed.decode_batch("b", &z).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_round_trip(u in prop::collection::vec(0.0f64..=1.0, 3)) {
                let m = model();
                let head = m.head("a").unwrap();
                let q: Vec<f64> = u.iter().zip(&head.limits).map(|(t, &(lo, hi))| lo + t * (hi - lo)).collect();
                let back = head.denormalize(&head.normalize(&q));
                for (a, b) in q.iter().zip(&back) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn reparameterization_is_exact(
                u in prop::collection::vec(0.0f64..=1.0, 2),
                eps in prop::collection::vec(-3.0f64..3.0, 4),
            ) {
                let m = model();
                let head = m.head("b").unwrap();
                let q: Vec<f64> = u.iter().zip(&head.limits).map(|(t, &(lo, hi))| lo + t * (hi - lo)).collect();
                let code = m.encode_with_noise("b", &[q], Some(std::slice::from_ref(&eps))).unwrap().remove(0);
                let sigma = code.sigma();
                for k in 0..4 {
                    prop_assert_eq!(code.z[k], code.mu[k] + sigma[k] * eps[k]);
                }
            }
        }
    }
}
