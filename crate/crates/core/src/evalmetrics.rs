//! Latent-space evaluation: reconstruction, cross-hand transfer, latent
//! continuity and interpolation smoothness.
//!
//! Metrics are generic over [`Codec`] and [`Embodiment`] so they can be run
//! against simple test doubles as well as a trained [`LatentModel`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::handmodel::{sample_within, Digit, HandError, HandSpec};
use crate::latentspace::{LatentError, LatentModel};
use crate::objective::PairSet;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample count must be positive")]
    NoSamples,
    #[error("interpolation needs at least 4 steps, got {0}")]
    TooFewSteps(usize),
    #[error("`{from}` and `{to}` share no thumb pair")]
    NoCommonPairs { from: String, to: String },
    #[error("hand `{0}` has no thumb and opposing digit to pinch with")]
    NoPinchDigits(String),
    #[error("hand `{hand}`: only {found} of {wanted} pinch poses found within the candidate budget")]
    PinchBudget { hand: String, wanted: usize, found: usize },
    #[error("invalid epsilon {0}")]
    Epsilon(f64),
    #[error("malformed report record `{0}`")]
    Record(String),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Hand(#[from] HandError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Deterministic encoder/decoder addressed by hand name.
pub trait Codec {
    fn latent_dim(&self) -> usize;
    /// Posterior means for a batch of poses.
    fn encode_mean(&self, hand: &str, poses: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    fn decode(&self, hand: &str, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Kinematic view of a hand.
pub trait Embodiment {
    fn name(&self) -> &str;
    fn limits(&self) -> Vec<(f64, f64)>;
    /// Digits in the order used by [`Embodiment::fingertips`].
    fn digits(&self) -> Vec<Digit>;
    fn fingertips(&self, poses: &[Vec<f64>]) -> Result<Vec<Vec<[f64; 3]>>>;
}

impl Codec for LatentModel {
    fn latent_dim(&self) -> usize {
        LatentModel::latent_dim(self)
    }

    fn encode_mean(&self, hand: &str, poses: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode_batch(hand, poses, None)?.into_iter().map(|c| c.mu).collect())
    }

    fn decode(&self, hand: &str, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.decode_batch(hand, latents)?)
    }
}

impl Embodiment for HandSpec {
    fn name(&self) -> &str {
        HandSpec::name(self)
    }

    fn limits(&self) -> Vec<(f64, f64)> {
        self.actuated_limits()
    }

    fn digits(&self) -> Vec<Digit> {
        HandSpec::digits(self)
    }

    fn fingertips(&self, poses: &[Vec<f64>]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(self.fingertip_positions(poses)?)
    }
}

/// Which poses feed a transfer measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseSet {
    Pinch,
    Random,
}

impl PoseSet {
    fn tag(self) -> &'static str {
        match self {
            PoseSet::Pinch => "pinch",
            PoseSet::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinchConfig {
    /// Fraction of each candidate pool kept.
    pub keep_fraction: f64,
    /// Kept poses must also have a thumb gap below this (meters).
    pub max_distance: f64,
    /// Candidate pools drawn before giving up.
    pub max_pools: usize,
}

impl Default for PinchConfig {
    fn default() -> Self {
        PinchConfig {
            keep_fraction: 0.05,
            max_distance: 0.03,
            max_pools: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub samples: usize,
    pub interp_steps: usize,
    pub epsilon: f64,
    pub pinch: PinchConfig,
    pub pairs: PairSet,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            samples: 512,
            interp_steps: 32,
            epsilon: 0.05,
            pinch: PinchConfig::default(),
            pairs: PairSet::default(),
        }
    }
}

/// RNG for one metric, keyed by seed, metric tag and the hands involved.
pub fn metric_rng(seed: u64, tag: &str, hands: &[&str]) -> ChaCha8Rng {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&seed.to_le_bytes());
    feed(tag.as_bytes());
    for name in hands {
        feed(&[0xff]);
        feed(name.as_bytes());
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn uniform_poses<E: Embodiment + ?Sized>(hand: &E, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let limits = hand.limits();
    (0..n).map(|_| sample_within(&limits, rng)).collect()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn vec_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn digit_index<E: Embodiment + ?Sized>(hand: &E, d: Digit) -> Option<usize> {
    hand.digits().iter().position(|&x| x == d)
}

/// Joint RMSE (radians) and fingertip RMSE (meters) of deterministic
/// reconstruction on `n` uniform poses.
pub fn recon_rmse<C: Codec + ?Sized, E: Embodiment + ?Sized>(codec: &C, hand: &E, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    let mut rng = metric_rng(seed, "recon", &[hand.name()]);
    let poses = uniform_poses(hand, n, &mut rng);
    let z = codec.encode_mean(hand.name(), &poses)?;
    let recon = codec.decode(hand.name(), &z)?;
    let (mut sq, mut count) = (0.0, 0usize);
    for (q, r) in poses.iter().zip(&recon) {
        for (a, b) in q.iter().zip(r) {
            sq += (a - b).powi(2);
            count += 1;
        }
    }
    let joint = (sq / count as f64).sqrt();
    let tips = hand.fingertips(&poses)?;
    let tips_hat = hand.fingertips(&recon)?;
    let (mut sq, mut count) = (0.0, 0usize);
    for (p, p_hat) in tips.iter().zip(&tips_hat) {
        for (a, b) in p.iter().zip(p_hat) {
            sq += norm(sub(*a, *b)).powi(2);
            count += 1;
        }
    }
    let tip = if count == 0 { 0.0 } else { (sq / count as f64).sqrt() };
    Ok((joint, tip))
}

/// Smallest thumb-to-digit distance of each pose.
fn pinch_scores<E: Embodiment + ?Sized>(hand: &E, poses: &[Vec<f64>]) -> Result<Vec<f64>> {
    let digits = hand.digits();
    let thumb = digit_index(hand, Digit::Thumb).ok_or_else(|| MetricError::NoPinchDigits(hand.name().into()))?;
    if digits.len() < 2 {
        return Err(MetricError::NoPinchDigits(hand.name().into()));
    }
    Ok(hand
        .fingertips(poses)?
        .iter()
        .map(|tips| {
            (0..digits.len())
                .filter(|&k| k != thumb)
                .map(|k| norm(sub(tips[thumb], tips[k])))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Pinch poses: the tightest fraction of uniformly drawn candidate pools,
/// each also under the configured distance cap.
pub fn make_pinch_poses<E: Embodiment + ?Sized>(
    hand: &E,
    n: usize,
    seed: u64,
    config: &PinchConfig,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let pool = ((n as f64) / config.keep_fraction).ceil() as usize;
    let keep = ((pool as f64) * config.keep_fraction).round().max(1.0) as usize;
    let mut rng = metric_rng(seed, "pinch-poses", &[hand.name()]);
    let mut kept = Vec::with_capacity(n);
    for _ in 0..config.max_pools {
        let candidates = uniform_poses(hand, pool, &mut rng);
        let scores = pinch_scores(hand, &candidates)?;
        let mut order: Vec<usize> = (0..pool).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in order.iter().take(keep) {
            if scores[i] <= config.max_distance && kept.len() < n {
                kept.push(candidates[i].clone());
            }
        }
        if kept.len() == n {
            return Ok(kept);
        }
    }
    Err(MetricError::PinchBudget {
        hand: hand.name().to_string(),
        wanted: n,
        found: kept.len(),
    })
}

/// Angle (degrees) between two lines and the gap in their lengths.
pub fn line_errors(delta_s: [f64; 3], delta_t: [f64; 3]) -> (f64, f64) {
    let (ns, nt) = (norm(delta_s), norm(delta_t));
    let angle = if ns < 1e-12 || nt < 1e-12 {
        0.0
    } else {
        // atan2 form of the arccos angle; exact 0 for identical lines
        let dot = delta_s[0] * delta_t[0] + delta_s[1] * delta_t[1] + delta_s[2] * delta_t[2];
        let cross = [
            delta_s[1] * delta_t[2] - delta_s[2] * delta_t[1],
            delta_s[2] * delta_t[0] - delta_s[0] * delta_t[2],
            delta_s[0] * delta_t[1] - delta_s[1] * delta_t[0],
        ];
        norm(cross).atan2(dot).to_degrees()
    };
    (angle, (ns - nt).abs())
}

/// Mean direction error (degrees) and distance error (meters) between
/// thumb lines on `source` poses and on their cross-decoded `target` poses.
pub fn transfer_error_on<C: Codec + ?Sized, E: Embodiment + ?Sized>(
    codec: &C,
    source: &E,
    target: &E,
    poses: &[Vec<f64>],
    pairs: &PairSet,
) -> Result<(f64, f64)> {
    if poses.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let effective: Vec<(usize, usize, usize, usize)> = pairs
        .pairs()
        .iter()
        .filter_map(|&(i, j)| {
            Some((
                digit_index(source, i)?,
                digit_index(source, j)?,
                digit_index(target, i)?,
                digit_index(target, j)?,
            ))
        })
        .collect();
    if effective.is_empty() {
        return Err(MetricError::NoCommonPairs {
            from: source.name().to_string(),
            to: target.name().to_string(),
        });
    }
    let z = codec.encode_mean(source.name(), poses)?;
    let decoded = codec.decode(target.name(), &z)?;
    let src_tips = source.fingertips(poses)?;
    let tgt_tips = target.fingertips(&decoded)?;
    let (mut dir, mut dist) = (0.0, 0.0);
    for (s, t) in src_tips.iter().zip(&tgt_tips) {
        for &(si, sj, ti, tj) in &effective {
            let (a, d) = line_errors(sub(s[si], s[sj]), sub(t[ti], t[tj]));
            dir += a;
            dist += d;
        }
    }
    let count = (poses.len() * effective.len()) as f64;
    Ok((dir / count, dist / count))
}

/// Transfer error on `n` freshly generated poses of the given kind.
#[allow(clippy::too_many_arguments)]
pub fn transfer_error<C: Codec + ?Sized, E: Embodiment + ?Sized>(
    codec: &C,
    source: &E,
    target: &E,
    kind: PoseSet,
    n: usize,
    seed: u64,
    pairs: &PairSet,
    pinch: &PinchConfig,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    let poses = match kind {
        PoseSet::Pinch => make_pinch_poses(source, n, seed, pinch)?,
        PoseSet::Random => {
            let mut rng = metric_rng(seed, kind.tag(), &[source.name(), target.name()]);
            uniform_poses(source, n, &mut rng)
        }
    };
    transfer_error_on(codec, source, target, &poses, pairs)
}

/// Mean joint-vector deviation (radians) and mean per-fingertip deviation
/// (meters) when latent codes are perturbed by `epsilon`·N(0, I).
pub fn latent_continuity<C: Codec + ?Sized, E: Embodiment + ?Sized>(
    codec: &C,
    hand: &E,
    epsilon: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(MetricError::Epsilon(epsilon));
    }
    let mut rng = metric_rng(seed, "continuity", &[hand.name()]);
    let poses = uniform_poses(hand, n, &mut rng);
    let z = codec.encode_mean(hand.name(), &poses)?;
    let perturbed: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| {
            zi.iter()
                .map(|&v| {
                    let g: f64 = rng.sample(StandardNormal);
                    v + epsilon * g
                })
                .collect()
        })
        .collect();
    let base = codec.decode(hand.name(), &z)?;
    let moved = codec.decode(hand.name(), &perturbed)?;
    let joint = base.iter().zip(&moved).map(|(a, b)| vec_norm(a, b)).sum::<f64>() / n as f64;
    let tips = hand.fingertips(&base)?;
    let tips_moved = hand.fingertips(&moved)?;
    let per_sample: Vec<f64> = tips
        .iter()
        .zip(&tips_moved)
        .map(|(a, b)| {
            if a.is_empty() {
                0.0
            } else {
                a.iter().zip(b).map(|(p, q)| norm(sub(*p, *q))).sum::<f64>() / a.len() as f64
            }
        })
        .collect();
    let tip = per_sample.iter().sum::<f64>() / n as f64;
    Ok((joint, tip))
}

/// Mean acceleration and jerk norms of fingertip paths sampled at unit steps.
///
/// `path[k][d]` is the position of digit `d` at step `k`. Acceleration is
/// the central second difference, jerk the difference of consecutive
/// accelerations.
pub fn trajectory_smoothness(path: &[Vec<[f64; 3]>]) -> Result<(f64, f64)> {
    let k = path.len();
    if k < 4 {
        return Err(MetricError::TooFewSteps(k));
    }
    let digits = path[0].len();
    let (mut accel, mut na) = (0.0, 0usize);
    let (mut jerk, mut nj) = (0.0, 0usize);
    for d in 0..digits {
        for s in 1..k - 1 {
            let a = (0..3).map(|x| path[s + 1][d][x] - 2.0 * path[s][d][x] + path[s - 1][d][x]);
            accel += a.map(|v| v * v).sum::<f64>().sqrt();
            na += 1;
        }
        for s in 1..k - 2 {
            let j = (0..3).map(|x| path[s + 2][d][x] - 3.0 * path[s + 1][d][x] + 3.0 * path[s][d][x] - path[s - 1][d][x]);
            jerk += j.map(|v| v * v).sum::<f64>().sqrt();
            nj += 1;
        }
    }
    if digits == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((accel / na as f64, jerk / nj as f64))
}

/// Latent codes `z_a + k·(z_b − z_a)/(steps − 1)` for `k = 0..steps`.
pub fn interpolate(z_a: &[f64], z_b: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let delta: Vec<f64> = z_a.iter().zip(z_b).map(|(a, b)| (b - a) / (steps - 1) as f64).collect();
    (0..steps)
        .map(|k| z_a.iter().zip(&delta).map(|(a, d)| a + k as f64 * d).collect())
        .collect()
}

/// Mean fingertip acceleration and jerk along latent interpolations between
/// `n` random pose pairs.
pub fn interpolation_smoothness<C: Codec + ?Sized, E: Embodiment + ?Sized>(
    codec: &C,
    hand: &E,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if steps < 4 {
        return Err(MetricError::TooFewSteps(steps));
    }
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    let mut rng = metric_rng(seed, "interpolation", &[hand.name()]);
    let starts = uniform_poses(hand, n, &mut rng);
    let ends = uniform_poses(hand, n, &mut rng);
    let za = codec.encode_mean(hand.name(), &starts)?;
    let zb = codec.encode_mean(hand.name(), &ends)?;
    let latents: Vec<Vec<f64>> = za
        .iter()
        .zip(&zb)
        .flat_map(|(a, b)| interpolate(a, b, steps))
        .collect();
    let decoded = codec.decode(hand.name(), &latents)?;
    let tips = hand.fingertips(&decoded)?;
    let (mut accel, mut jerk) = (0.0, 0.0);
    for path in tips.chunks(steps) {
        let (a, j) = trajectory_smoothness(path)?;
        accel += a;
        jerk += j;
    }
    Ok((accel / n as f64, jerk / n as f64))
}

/// The ten evaluation statistics plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub recon_joint_rmse: f64,
    pub recon_tip_rmse: f64,
    pub pinch_dir_err: f64,
    pub pinch_dist_err: f64,
    pub rand_dir_err: f64,
    pub rand_dist_err: f64,
    pub continuity_joint: f64,
    pub continuity_tip: f64,
    pub interp_accel_mean: f64,
    pub interp_jerk_mean: f64,
    pub seed: u64,
    pub samples: usize,
    pub interp_steps: usize,
    pub epsilon: f64,
    pub hands: Vec<String>,
    /// Ordered hand pairs averaged for the transfer columns.
    pub transfer_pairs: usize,
}

impl MetricsReport {
    pub fn metrics(&self) -> [(&'static str, f64); 10] {
        [
            ("recon_joint_rmse", self.recon_joint_rmse),
            ("recon_tip_rmse", self.recon_tip_rmse),
            ("pinch_dir_err", self.pinch_dir_err),
            ("pinch_dist_err", self.pinch_dist_err),
            ("rand_dir_err", self.rand_dir_err),
            ("rand_dist_err", self.rand_dist_err),
            ("continuity_joint", self.continuity_joint),
            ("continuity_tip", self.continuity_tip),
            ("interp_accel_mean", self.interp_accel_mean),
            ("interp_jerk_mean", self.interp_jerk_mean),
        ]
    }

    /// `key=value` lines, one per metric and bookkeeping field.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.metrics() {
            let _ = writeln!(out, "{k}={v:?}");
        }
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "samples={}", self.samples);
        let _ = writeln!(out, "interp_steps={}", self.interp_steps);
        let _ = writeln!(out, "epsilon={:?}", self.epsilon);
        let _ = writeln!(out, "hands={}", self.hands.join(","));
        let _ = writeln!(out, "transfer_pairs={}", self.transfer_pairs);
        out
    }

    /// Parses the output of [`MetricsReport::to_records`], ignoring lines
    /// without `=`.
    pub fn from_records(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| MetricError::Record(k.to_string()));
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| MetricError::Record(k.to_string())) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| MetricError::Record(k.to_string())) };
        let hands = get("hands")?;
        Ok(MetricsReport {
            recon_joint_rmse: real("recon_joint_rmse")?,
            recon_tip_rmse: real("recon_tip_rmse")?,
            pinch_dir_err: real("pinch_dir_err")?,
            pinch_dist_err: real("pinch_dist_err")?,
            rand_dir_err: real("rand_dir_err")?,
            rand_dist_err: real("rand_dist_err")?,
            continuity_joint: real("continuity_joint")?,
            continuity_tip: real("continuity_tip")?,
            interp_accel_mean: real("interp_accel_mean")?,
            interp_jerk_mean: real("interp_jerk_mean")?,
            seed: get("seed")?.parse().map_err(|_| MetricError::Record("seed".into()))?,
            samples: int("samples")?,
            interp_steps: int("interp_steps")?,
            epsilon: real("epsilon")?,
            hands: if hands.is_empty() {
                Vec::new()
            } else {
                hands.split(',').map(str::to_string).collect()
            },
            transfer_pairs: int("transfer_pairs")?,
        })
    }

    /// Human-readable table followed by the machine records.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# latent space evaluation");
        let _ = writeln!(out, "hands: {}", self.hands.join(", "));
        let _ = writeln!(
            out,
            "seed {}  samples {}  interpolation steps {}  epsilon {}",
            self.seed, self.samples, self.interp_steps, self.epsilon
        );
        let _ = writeln!(out);
        let rows = [
            ("Reconstruction", "Joint (rad)", self.recon_joint_rmse),
            ("Reconstruction", "Tip (m)", self.recon_tip_rmse),
            ("Cross Embodiment", "Pinch dir (deg)", self.pinch_dir_err),
            ("Cross Embodiment", "Pinch dist (m)", self.pinch_dist_err),
            ("Cross Embodiment", "Random dir (deg)", self.rand_dir_err),
            ("Cross Embodiment", "Random dist (m)", self.rand_dist_err),
            ("Latent Continuity", "Joint (rad)", self.continuity_joint),
            ("Latent Continuity", "Tip (m)", self.continuity_tip),
            ("Interpolation", "Accel", self.interp_accel_mean),
            ("Interpolation", "Jerk", self.interp_jerk_mean),
        ];
        let _ = writeln!(out, "{:<18} {:<17} {:>14}", "group", "metric", "value");
        for (group, name, value) in rows {
            let _ = writeln!(out, "{group:<18} {name:<17} {value:>14.6e}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "[records]");
        out.push_str(&self.to_records());
        out
    }
}

/// Every metric, averaged over hands (transfer over ordered hand pairs).
/// Hands are visited in name order, so the input order does not matter.
pub fn full_report<C: Codec + ?Sized, E: Embodiment>(codec: &C, hands: &[E], config: &EvalConfig) -> Result<MetricsReport> {
    if config.samples == 0 {
        return Err(MetricError::NoSamples);
    }
    let mut sorted: Vec<&E> = hands.iter().collect();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));
    let count = sorted.len().max(1) as f64;
    let n = config.samples;

    let (mut rj, mut rt, mut cj, mut ct, mut ia, mut ij) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for hand in &sorted {
        let (j, t) = recon_rmse(codec, *hand, n, config.seed)?;
        rj += j;
        rt += t;
        let (j, t) = latent_continuity(codec, *hand, config.epsilon, n, config.seed)?;
        cj += j;
        ct += t;
        let (a, jk) = interpolation_smoothness(codec, *hand, n, config.interp_steps, config.seed)?;
        ia += a;
        ij += jk;
    }

    let (mut pd, mut pl, mut rd, mut rl, mut pairs) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for source in &sorted {
        let pinch = if sorted.len() > 1 {
            make_pinch_poses(*source, n, config.seed, &config.pinch)?
        } else {
            Vec::new()
        };
        for target in sorted.iter().filter(|t| t.name() != source.name()) {
            let (d, l) = transfer_error_on(codec, *source, *target, &pinch, &config.pairs)?;
            pd += d;
            pl += l;
            let (d, l) = transfer_error(codec, *source, *target, PoseSet::Random, n, config.seed, &config.pairs, &config.pinch)?;
            rd += d;
            rl += l;
            pairs += 1;
        }
    }
    let per_pair = pairs.max(1) as f64;
    Ok(MetricsReport {
        recon_joint_rmse: rj / count,
        recon_tip_rmse: rt / count,
        pinch_dir_err: pd / per_pair,
        pinch_dist_err: pl / per_pair,
        rand_dir_err: rd / per_pair,
        rand_dist_err: rl / per_pair,
        continuity_joint: cj / count,
        continuity_tip: ct / count,
        interp_accel_mean: ia / count,
        interp_jerk_mean: ij / count,
        seed: config.seed,
        samples: n,
        interp_steps: config.interp_steps,
        epsilon: config.epsilon,
        hands: sorted.iter().map(|h| h.name().to_string()).collect(),
        transfer_pairs: pairs,
    })
}
