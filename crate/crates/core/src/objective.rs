//! Training losses: reconstruction (L1), pinch retargeting (L2) and KL (L3).
//!
//! [`Objective::record`] builds all three terms in one tape so a single backward pass
//! reaches every head. The free functions evaluate the same formulas on
//! plain values.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gradcore::{GradError, Gradients, Tape, Tensor, Var};
use crate::handmodel::{Digit, HandError, HandSpec};
use crate::latentspace::{BoundModel, LatentCode, LatentError, LatentModel};

/// Lengths below this are treated as having no direction.
pub const DIRECTION_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("loss needs at least one hand")]
    NoHands,
    #[error("retargeting loss needs at least two hands, got {0}")]
    TooFewHands(usize),
    #[error("no pinch pair survives between `{from}` and `{to}`")]
    NoPairs { from: String, to: String },
    #[error("no hand spec named `{0}`")]
    MissingSpec(String),
    #[error("hand `{hand}`: {detail}")]
    Batch { hand: String, detail: String },
    #[error("invalid loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Hand(#[from] HandError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_dis: f64,
    pub lambda_dir: f64,
    pub lambda_dis_exp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1e-5,
            lambda_dis: 2000.0,
            lambda_dir: 5.0,
            lambda_dis_exp: 12.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("beta", self.beta),
            ("lambda_dis", self.lambda_dis),
            ("lambda_dir", self.lambda_dir),
            ("lambda_dis_exp", self.lambda_dis_exp),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ObjectiveError::Weight { name, value });
            }
        }
        Ok(())
    }

    fn retargeting_active(&self) -> bool {
        self.lambda_dis > 0.0 || self.lambda_dir > 0.0
    }
}

/// Ordered thumb-anchored digit pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(Digit, Digit)>,
}

impl Default for PairSet {
    fn default() -> Self {
        PairSet {
            pairs: [Digit::Index, Digit::Middle, Digit::Ring, Digit::Little]
                .into_iter()
                .map(|d| (Digit::Thumb, d))
                .collect(),
        }
    }
}

impl PairSet {
    /// Pairs must be thumb paired with a distinct opposing digit.
    pub fn new(pairs: Vec<(Digit, Digit)>) -> Option<Self> {
        let valid = pairs.iter().all(|&(a, b)| a == Digit::Thumb && b != Digit::Thumb)
            && pairs.iter().enumerate().all(|(k, p)| !pairs[..k].contains(p));
        valid.then_some(PairSet { pairs })
    }

    pub fn pairs(&self) -> &[(Digit, Digit)] {
        &self.pairs
    }

    /// Pairs whose digits exist on both hands.
    pub fn effective(&self, source: &HandSpec, target: &HandSpec) -> Vec<(Digit, Digit)> {
        self.pairs
            .iter()
            .copied()
            .filter(|&(i, j)| [i, j].iter().all(|&d| source.has_digit(d) && target.has_digit(d)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    /// Reconstruction MSE of each hand.
    pub per_hand_l1: BTreeMap<String, f64>,
    /// Mean retargeting term for each (source, target, pair).
    pub per_pair_l2: Vec<PairTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTerm {
    pub source: String,
    pub target: String,
    pub pair: (Digit, Digit),
    pub value: f64,
}

/// One hand's poses for a step, with optional reparameterization noise
/// (`None` encodes with `z = μ`).
#[derive(Debug, Clone, PartialEq)]
pub struct HandBatch {
    pub hand: String,
    pub poses: Vec<Vec<f64>>,
    pub noise: Option<Vec<Vec<f64>>>,
}

impl HandBatch {
    pub fn deterministic(hand: impl Into<String>, poses: Vec<Vec<f64>>) -> Self {
        HandBatch {
            hand: hand.into(),
            poses,
            noise: None,
        }
    }
}

/// Loss configuration. `reconstruction = false` drops L1 from the total
/// while still reporting it.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub pairs: PairSet,
    pub reconstruction: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::new(LossWeights::default())
    }
}

/// Tape handles of the recorded loss terms.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
    per_hand: Vec<(String, Var)>,
    per_pair: Vec<(String, String, (Digit, Digit), Var)>,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let item = |v: Var| -> Result<f64> { Ok(tape.value(v)?.data()[0]) };
        Ok(LossBreakdown {
            l1: item(self.l1)?,
            l2: item(self.l2)?,
            l3: item(self.l3)?,
            total: item(self.total)?,
            per_hand_l1: self
                .per_hand
                .iter()
                .map(|(h, v)| Ok((h.clone(), item(*v)?)))
                .collect::<Result<_>>()?,
            per_pair_l2: self
                .per_pair
                .iter()
                .map(|(s, t, pair, v)| {
                    Ok(PairTerm {
                        source: s.clone(),
                        target: t.clone(),
                        pair: *pair,
                        value: item(*v)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

impl Objective {
    pub fn new(weights: LossWeights) -> Self {
        Objective {
            weights,
            pairs: PairSet::default(),
            reconstruction: true,
        }
    }

    /// Records the full objective on `tape` for a bound model.
    pub fn record(
        &self,
        tape: &mut Tape,
        model: &LatentModel,
        bound: &BoundModel,
        specs: &[HandSpec],
        batch: &[HandBatch],
    ) -> Result<LossGraph> {
        self.weights.validate()?;
        if batch.is_empty() {
            return Err(ObjectiveError::NoHands);
        }
        let spec_of = |hand: &str| -> Result<&HandSpec> {
            specs
                .iter()
                .find(|s| s.name() == hand)
                .ok_or_else(|| ObjectiveError::MissingSpec(hand.to_string()))
        };

        struct Encoded<'a> {
            hand: &'a str,
            head: usize,
            poses: Var,
            z: Var,
            rows: usize,
        }

        let mut encoded = Vec::with_capacity(batch.len());
        let mut kl_parts = Vec::with_capacity(batch.len());
        let mut samples = 0usize;
        for hb in batch {
            let index = model.head_index(&hb.hand)?;
            let head = &model.heads()[index];
            let bad = |detail: String| ObjectiveError::Batch {
                hand: hb.hand.clone(),
                detail,
            };
            if hb.poses.is_empty() {
                return Err(bad("empty batch".into()));
            }
            if let Some(p) = hb.poses.iter().find(|p| p.len() != head.dof()) {
                return Err(bad(format!("pose has {} values, expected {}", p.len(), head.dof())));
            }
            let normalized: Vec<Vec<f64>> = hb.poses.iter().map(|p| head.normalize(p)).collect();
            let x = tape.constant(Tensor::from_rows(&normalized)?);
            let bh = bound.head(index);
            let (mu, log_var) = bh.encode(tape, x)?;
            let z = match &hb.noise {
                None => mu,
                Some(eps) => {
                    if eps.len() != hb.poses.len() || eps.iter().any(|e| e.len() != model.latent_dim()) {
                        return Err(bad("noise does not match batch and latent size".into()));
                    }
                    let eps = tape.constant(Tensor::from_rows(eps)?);
                    bh.reparameterize(tape, mu, log_var, eps)?
                }
            };
            kl_parts.push(record_kl_sum(tape, mu, log_var)?);
            samples += hb.poses.len();
            let poses = tape.constant(Tensor::from_rows(&hb.poses)?);
            encoded.push(Encoded {
                hand: &hb.hand,
                head: index,
                poses,
                z,
                rows: hb.poses.len(),
            });
        }

        // L1: mean over hands of per-hand MSE in radians.
        let mut per_hand = Vec::with_capacity(encoded.len());
        let mut l1_parts = Vec::with_capacity(encoded.len());
        for e in &encoded {
            let recon = bound.head(e.head).decode_joints(tape, e.z)?;
            let diff = tape.sub(recon, e.poses)?;
            let sq = tape.square(diff)?;
            let mse = tape.mean(sq)?;
            per_hand.push((e.hand.to_string(), mse));
            l1_parts.push(mse);
        }
        let l1_sum = sum_vars(tape, &l1_parts)?;
        let l1 = tape.scale(l1_sum, 1.0 / l1_parts.len() as f64)?;

        // L3: KL summed over latent dims, averaged over every sample.
        let kl_sum = sum_vars(tape, &kl_parts)?;
        let l3 = tape.scale(kl_sum, 1.0 / samples as f64)?;

        // L2: each hand as source against every other hand as target.
        let mut per_pair = Vec::new();
        let mut l2_parts = Vec::new();
        if encoded.len() >= 2 && self.weights.retargeting_active() {
            for s in &encoded {
                let source = spec_of(s.hand)?;
                let src_tips = source.fingertip_positions(&batch.iter().find(|b| b.hand == s.hand).expect("batch").poses)?;
                for t in &encoded {
                    if t.hand == s.hand {
                        continue;
                    }
                    let target = spec_of(t.hand)?;
                    let pairs = self.pairs.effective(source, target);
                    if pairs.is_empty() {
                        return Err(ObjectiveError::NoPairs {
                            from: s.hand.to_string(),
                            to: t.hand.to_string(),
                        });
                    }
                    let decoded = bound.head(t.head).decode_joints(tape, s.z)?;
                    let tips = target.fk_on_tape(tape, decoded)?;
                    let src_digits = source.digits();
                    for &(i, j) in &pairs {
                        let (si, sj) = (
                            src_digits.iter().position(|&d| d == i).expect("digit"),
                            src_digits.iter().position(|&d| d == j).expect("digit"),
                        );
                        let delta_s: Vec<[f64; 3]> = src_tips
                            .iter()
                            .map(|row| sub3(row[si], row[sj]))
                            .collect();
                        let delta_t = tape.sub(tips[&i], tips[&j])?;
                        let term = self.record_pair_term(tape, &delta_s, delta_t, s.rows)?;
                        per_pair.push((s.hand.to_string(), t.hand.to_string(), (i, j), term));
                        l2_parts.push(term);
                    }
                }
            }
        }
        let l2 = if l2_parts.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let sum = sum_vars(tape, &l2_parts)?;
            tape.scale(sum, 1.0 / l2_parts.len() as f64)?
        };

        let kl_term = tape.scale(l3, self.weights.beta)?;
        let total = if self.reconstruction {
            let a = tape.add(l1, l2)?;
            tape.add(a, kl_term)?
        } else {
            tape.add(l2, kl_term)?
        };
        Ok(LossGraph {
            l1,
            l2,
            l3,
            total,
            per_hand,
            per_pair,
        })
    }

    /// Batch mean of `w·[λ_dis(‖δs‖−‖δt‖)² + λ_dir(1−c)]` for one pair.
    fn record_pair_term(&self, tape: &mut Tape, delta_s: &[[f64; 3]], delta_t: Var, rows: usize) -> Result<Var> {
        let w = &self.weights;
        let ns: Vec<f64> = delta_s.iter().map(|d| norm3(*d)).collect();
        let nt_var = tape.row_norm2(delta_t)?;
        let nt: Vec<f64> = tape.value(nt_var)?.data().to_vec();
        let mask: Vec<f64> = ns
            .iter()
            .zip(&nt)
            .map(|(&a, &b)| if a < DIRECTION_EPS || b < DIRECTION_EPS { 0.0 } else { 1.0 })
            .collect();
        let column = |tape: &mut Tape, v: Vec<f64>| tape.constant(Tensor::new(vec![rows, 1], v).expect("column"));

        let ns_var = column(tape, ns.clone());
        let gap = tape.sub(ns_var, nt_var)?;
        let gap2 = tape.square(gap)?;
        let dist = tape.scale(gap2, w.lambda_dis)?;

        let ds_flat: Vec<f64> = delta_s.iter().flatten().copied().collect();
        let ds_var = tape.constant(Tensor::new(vec![rows, 3], ds_flat)?);
        let prod = tape.mul(ds_var, delta_t)?;
        let dot = tape.sum_axis(prod, 1)?;
        let ns_mask: Vec<f64> = ns.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let ns_mask = column(tape, ns_mask);
        let nt_masked = tape.mul(nt_var, ns_mask)?;
        let unmasked: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let unmasked = column(tape, unmasked);
        let denom = tape.add(nt_masked, unmasked)?;
        let cos = tape.div(dot, denom)?;
        let mask_var = column(tape, mask);
        let cos = tape.mul(cos, mask_var)?;
        let one_minus = tape.scale(cos, -1.0)?;
        let one_minus = tape.offset(one_minus, 1.0)?;
        let one_minus = tape.mul(one_minus, mask_var)?;
        let dir = tape.scale(one_minus, w.lambda_dir)?;

        let inner = tape.add(dist, dir)?;
        let weight: Vec<f64> = ns.iter().map(|&n| (-w.lambda_dis_exp * n).exp()).collect();
        let weight = column(tape, weight);
        let weighted = tape.mul(inner, weight)?;
        Ok(tape.mean(weighted)?)
    }

    /// Loss values and, when `with_grads`, gradients in
    /// [`LatentModel::parameters`] order.
    pub fn evaluate(
        &self,
        model: &LatentModel,
        specs: &[HandSpec],
        batch: &[HandBatch],
        with_grads: bool,
    ) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, with_grads);
        let graph = self.record(&mut tape, model, &bound, specs, batch)?;
        let breakdown = graph.breakdown(&tape)?;
        let grads = if with_grads {
            let mut g: Gradients = tape.backward(graph.total)?;
            Some(
                bound
                    .params()
                    .iter()
                    .map(|&p| g.remove(p).expect("gradient for every parameter"))
                    .collect(),
            )
        } else {
            None
        };
        Ok((breakdown, grads))
    }

    /// Deterministic L2 of `model` on `batch`.
    pub fn retargeting_loss(&self, model: &LatentModel, specs: &[HandSpec], batch: &[HandBatch]) -> Result<f64> {
        if batch.len() < 2 {
            return Err(ObjectiveError::TooFewHands(batch.len()));
        }
        Ok(self.evaluate(model, specs, &deterministic(batch), false)?.0.l2)
    }

    /// Deterministic L1 + L2 + β·L3 of `model` on `batch`.
    pub fn total_loss(&self, model: &LatentModel, specs: &[HandSpec], batch: &[HandBatch]) -> Result<LossBreakdown> {
        Ok(self.evaluate(model, specs, batch, false)?.0)
    }
}

fn deterministic(batch: &[HandBatch]) -> Vec<HandBatch> {
    batch
        .iter()
        .map(|b| HandBatch::deterministic(b.hand.clone(), b.poses.clone()))
        .collect()
}

fn record_kl_sum(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var, GradError> {
    // ½ Σ (μ² + e^lv − 1 − lv)
    let mu2 = tape.square(mu)?;
    let var = tape.exp(log_var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.offset(b, -1.0)?;
    let s = tape.sum(c)?;
    tape.scale(s, 0.5)
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var, GradError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// `exp(−λ‖δ‖)`.
pub fn pinch_weight(delta: [f64; 3], lambda_dis_exp: f64) -> f64 {
    if lambda_dis_exp == 0.0 {
        return 1.0;
    }
    (-lambda_dis_exp * norm3(delta)).exp()
}

/// Single retargeting term for a source displacement and a decoded one.
pub fn retarget_term(delta_s: [f64; 3], delta_t: [f64; 3], weights: &LossWeights) -> f64 {
    let (ns, nt) = (norm3(delta_s), norm3(delta_t));
    let c = if ns < DIRECTION_EPS || nt < DIRECTION_EPS {
        1.0
    } else {
        (delta_s[0] * delta_t[0] + delta_s[1] * delta_t[1] + delta_s[2] * delta_t[2]) / (ns * nt)
    };
    pinch_weight(delta_s, weights.lambda_dis_exp)
        * (weights.lambda_dis * (ns - nt).powi(2) + weights.lambda_dir * (1.0 - c))
}

/// Batch mean of `½Σ(μ² + σ² − 1 − ln σ²)`; zero for an empty batch.
pub fn kl_loss(codes: &[LatentCode]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let sum: f64 = codes
        .iter()
        .map(|c| {
            0.5 * c
                .mu
                .iter()
                .zip(&c.log_var)
                .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
                .sum::<f64>()
        })
        .sum();
    sum / codes.len() as f64
}

/// Mean over hands of the per-hand MSE. Each entry is `(poses, reconstructions)`.
pub fn reconstruction_loss(hands: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> Result<f64> {
    if hands.is_empty() {
        return Err(ObjectiveError::NoHands);
    }
    let mut total = 0.0;
    for (k, (q, q_hat)) in hands.iter().enumerate() {
        let shape_ok = q.len() == q_hat.len() && q.iter().zip(q_hat).all(|(a, b)| a.len() == b.len());
        if !shape_ok || q.is_empty() {
            return Err(ObjectiveError::Batch {
                hand: format!("#{k}"),
                detail: "reconstruction shape differs from input".into(),
            });
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for (a, b) in q.iter().zip(q_hat) {
            for (x, y) in a.iter().zip(b) {
                sum += (x - y).powi(2);
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / hands.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::{Actuation, FingertipFrame, Frame, JointDef};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    /// Two-finger planar hand: thumb and index each a single revolute link.
    fn planar(name: &str, digits: &[(Digit, f64)]) -> HandSpec {
        let mut joints = Vec::new();
        let mut tips = BTreeMap::new();
        for (k, &(digit, y)) in digits.iter().enumerate() {
            let joint = format!("{}_j", digit.as_str());
            joints.push(JointDef {
                name: joint.clone(),
                parent: None,
                origin_translation: [0.0, y, 0.0],
                origin_rotation: [0.0, 0.0, 0.0],
                axis: [0.0, 0.0, 1.0],
                limits: (-0.5 - 0.1 * k as f64, 1.0),
                actuation: Actuation::Actuated,
            });
            tips.insert(
                digit,
                FingertipFrame {
                    joint,
                    offset: [0.05, 0.0, 0.0],
                },
            );
        }
        HandSpec::new(name.to_string(), Frame::default(), joints, tips).unwrap()
    }

    fn twin() -> (Vec<HandSpec>, LatentModel) {
        let a = planar("a", &[(Digit::Thumb, 0.02), (Digit::Index, -0.02)]);
        let b = planar("b", &[(Digit::Thumb, 0.03), (Digit::Index, -0.01)]);
        let model = LatentModel::new(&[a.clone(), b.clone()], 3, &[5], 4).unwrap();
        (vec![a, b], model)
    }

    fn batch() -> Vec<HandBatch> {
        vec![
            HandBatch {
                hand: "a".into(),
                poses: vec![vec![0.2, 0.4], vec![-0.3, 0.9], vec![0.0, 0.0]],
                noise: Some(vec![vec![0.1, -0.4, 0.3], vec![1.2, 0.0, -0.7], vec![0.0, 0.5, 0.2]]),
            },
            HandBatch {
                hand: "b".into(),
                poses: vec![vec![0.6, -0.1], vec![0.1, 0.5]],
                noise: Some(vec![vec![-0.2, 0.8, 0.1], vec![0.3, -1.1, 0.6]]),
            },
        ]
    }

    #[test]
    fn pinch_weight_cases() {
        assert_eq!(pinch_weight([0.0; 3], 12.0), 1.0);
        assert!(close(pinch_weight([0.1, 0.0, 0.0], 12.0), 0.301_194_211_912_202_1, 1e-12));
        assert_eq!(pinch_weight([0.3, 0.1, 0.0], 0.0), 1.0);
    }

    #[test]
    fn retarget_term_cases() {
        let w = LossWeights::default();
        let t = retarget_term([0.05, 0.0, 0.0], [0.07, 0.0, 0.0], &w);
        assert!(close(t, 0.8 * (-0.6f64).exp(), 1e-12));
        let anti = retarget_term([0.0, 0.04, 0.0], [0.0, -0.04, 0.0], &w);
        assert!(close(anti, (-12.0f64 * 0.04).exp() * 5.0 * 2.0, 1e-12));
        let degenerate = retarget_term([0.0; 3], [0.0, 0.0, 0.02], &w);
        assert!(close(degenerate, 2000.0 * 0.0004, 1e-12));
    }

    #[test]
    fn kl_cases() {
        let code = |mu: Vec<f64>, log_var: Vec<f64>| LatentCode {
            z: mu.clone(),
            mu,
            log_var,
        };
        assert_eq!(kl_loss(&[code(vec![0.0, 0.0], vec![0.0, 0.0])]), 0.0);
        assert_eq!(kl_loss(&[code(vec![1.0], vec![0.0])]), 0.5);
        let e = std::f64::consts::E;
        assert!(close(kl_loss(&[code(vec![0.0], vec![1.0])]), 0.5 * (e - 2.0), 1e-12));
    }

    #[test]
    fn reconstruction_cases() {
        assert_eq!(reconstruction_loss(&[(vec![vec![0.3, 0.1]], vec![vec![0.3, 0.1]])]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]])]).unwrap(), 1.0);
        let a = (vec![vec![0.0]], vec![vec![0.2f64.sqrt()]]);
        let b = (vec![vec![0.0]], vec![vec![0.4f64.sqrt()]]);
        assert!(close(reconstruction_loss(&[a, b]).unwrap(), 0.3, 1e-12));
        assert!(matches!(reconstruction_loss(&[]), Err(ObjectiveError::NoHands)));
    }

    #[test]
    fn breakdown_matches_plain_formulas() {
        let (specs, model) = twin();
        let obj = Objective::default();
        let b = batch();
        let (bd, _) = obj.evaluate(&model, &specs, &b, false).unwrap();

        // L3 and L1 from the model's own encode/decode.
        let mut codes = Vec::new();
        let mut recon = Vec::new();
        for hb in &b {
            let c = model.encode_with_noise(&hb.hand, &hb.poses, hb.noise.as_deref()).unwrap();
            let head = model.head(&hb.hand).unwrap();
            let mut t = Tape::new();
            let bound = model.bind(&mut t, false);
            let z = t.constant(Tensor::from_rows(&c.iter().map(|c| c.z.clone()).collect::<Vec<_>>()).unwrap());
            let out = bound.head(model.head_index(&hb.hand).unwrap()).decode_normalized(&mut t, z).unwrap();
            let q_hat: Vec<Vec<f64>> = t.value(out).unwrap().to_rows().iter().map(|x| head.denormalize(x)).collect();
            recon.push((hb.poses.clone(), q_hat));
            codes.extend(c);
        }
        assert!(close(bd.l3, kl_loss(&codes), 1e-12));
        assert!(close(bd.l1, reconstruction_loss(&recon).unwrap(), 1e-12));
        assert!(close(bd.total, bd.l1 + bd.l2 + 1e-5 * bd.l3, 1e-12));
        assert_eq!(bd.per_pair_l2.len(), 2);
        assert!(bd.l2 > 0.0);
    }

    #[test]
    fn l2_matches_term_by_term_oracle() {
        let (specs, model) = twin();
        let obj = Objective::default();
        let b = batch();
        let (bd, _) = obj.evaluate(&model, &specs, &b, false).unwrap();
        let mut terms = Vec::new();
        for hb in &b {
            let src = specs.iter().find(|s| s.name() == hb.hand).unwrap();
            let codes = model.encode_with_noise(&hb.hand, &hb.poses, hb.noise.as_deref()).unwrap();
            for tgt in specs.iter().filter(|s| s.name() != hb.hand) {
                let head = model.head(tgt.name()).unwrap();
                let mut t = Tape::new();
                let bound = model.bind(&mut t, false);
                let z = t.constant(Tensor::from_rows(&codes.iter().map(|c| c.z.clone()).collect::<Vec<_>>()).unwrap());
                let out = bound.head(model.head_index(tgt.name()).unwrap()).decode_normalized(&mut t, z).unwrap();
                let q_t: Vec<Vec<f64>> = t.value(out).unwrap().to_rows().iter().map(|x| head.denormalize(x)).collect();
                let st = src.fingertip_positions(&hb.poses).unwrap();
                let tt = tgt.fingertip_positions(&q_t).unwrap();
                let mean = st
                    .iter()
                    .zip(&tt)
                    .map(|(s, t)| retarget_term(sub3(s[0], s[1]), sub3(t[0], t[1]), &obj.weights))
                    .sum::<f64>()
                    / st.len() as f64;
                terms.push(mean);
            }
        }
        let expected = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!(close(bd.l2, expected, 1e-12), "{} vs {expected}", bd.l2);
    }

    #[test]
    fn zero_retarget_weights_give_zero_l2() {
        let (specs, model) = twin();
        let obj = Objective::new(LossWeights {
            lambda_dis: 0.0,
            lambda_dir: 0.0,
            ..LossWeights::default()
        });
        let (bd, _) = obj.evaluate(&model, &specs, &batch(), false).unwrap();
        assert_eq!(bd.l2, 0.0);
        assert!(bd.per_pair_l2.is_empty());
    }

    #[test]
    fn dropped_digit_changes_term_count() {
        let a = planar("a", &[(Digit::Thumb, 0.02), (Digit::Index, -0.02), (Digit::Middle, -0.04)]);
        let b = planar("b", &[(Digit::Thumb, 0.03), (Digit::Index, -0.01)]);
        let c = planar("c", &[(Digit::Thumb, 0.03), (Digit::Index, -0.01), (Digit::Middle, -0.03)]);
        let pairs = PairSet::default();
        assert_eq!(pairs.effective(&a, &b), vec![(Digit::Thumb, Digit::Index)]);
        assert_eq!(pairs.effective(&a, &c).len(), 2);
        let specs = vec![a, b, c];
        let model = LatentModel::new(&specs, 2, &[4], 1).unwrap();
        let b = vec![
            HandBatch::deterministic("a", vec![vec![0.1, 0.2, 0.3]]),
            HandBatch::deterministic("b", vec![vec![0.1, 0.2]]),
            HandBatch::deterministic("c", vec![vec![0.1, 0.2, -0.3]]),
        ];
        let (bd, _) = Objective::default().evaluate(&model, &specs, &b, false).unwrap();
        // a<->b: 1 each way, a<->c: 2 each way, b<->c: 1 each way
        assert_eq!(bd.per_pair_l2.len(), 8);
        assert!(bd.l2.is_finite());
    }

    #[test]
    fn no_shared_pair_is_an_error() {
        let a = planar("a", &[(Digit::Thumb, 0.02), (Digit::Index, -0.02)]);
        let b = planar("b", &[(Digit::Thumb, 0.03), (Digit::Middle, -0.01)]);
        let specs = vec![a, b];
        let model = LatentModel::new(&specs, 2, &[4], 1).unwrap();
        let batch = vec![
            HandBatch::deterministic("a", vec![vec![0.1, 0.2]]),
            HandBatch::deterministic("b", vec![vec![0.1, 0.2]]),
        ];
        assert!(matches!(
            Objective::default().evaluate(&model, &specs, &batch, false),
            Err(ObjectiveError::NoPairs { .. })
        ));
    }

    #[test]
    fn retargeting_loss_requires_two_hands() {
        let (specs, model) = twin();
        let one = vec![HandBatch::deterministic("a", vec![vec![0.1, 0.2]])];
        assert!(matches!(
            Objective::default().retargeting_loss(&model, &specs, &one),
            Err(ObjectiveError::TooFewHands(1))
        ));
    }

    #[test]
    fn total_without_reconstruction() {
        let (specs, model) = twin();
        let mut obj = Objective::default();
        obj.reconstruction = false;
        let (bd, _) = obj.evaluate(&model, &specs, &batch(), false).unwrap();
        assert!(close(bd.total, bd.l2 + 1e-5 * bd.l3, 1e-12));
        assert!(bd.l1 > 0.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (specs, model) = twin();
        let obj = Objective::default();
        let b = batch();
        let (_, grads) = obj.evaluate(&model, &specs, &b, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-6;
        // first encoder weight matrix of each head, plus a decoder bias
        let n_params = model.parameters().len();
        for (p, k) in [(0, 0), (0, 3), (2, 1), (n_params / 2, 2), (n_params - 1, 1)] {
            let mut plus = model.clone();
            plus.parameters_mut()[p].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.parameters_mut()[p].data_mut()[k] -= h;
            let fp = obj.evaluate(&plus, &specs, &b, false).unwrap().0.total;
            let fm = obj.evaluate(&minus, &specs, &b, false).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[p].data()[k];
            assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "param {p}[{k}]: {g} vs {fd}");
        }
    }

    #[test]
    fn beta_scaling_doubles_kl_contribution() {
        let (specs, model) = twin();
        let b = batch();
        let at = |beta: f64| {
            let obj = Objective::new(LossWeights { beta, ..LossWeights::default() });
            obj.evaluate(&model, &specs, &b, false).unwrap().0
        };
        let (one, two) = (at(0.5), at(1.0));
        let c1 = one.total - one.l1 - one.l2;
        let c2 = two.total - two.l1 - two.l2;
        assert!(close(c2, 2.0 * c1, 1e-12));
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(ObjectiveError::Weight { name: "beta", .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = [f64; 3]> {
            prop::array::uniform3(-0.1f64..0.1)
        }

        proptest! {
            #[test]
            fn direction_term_bounded(a in vec3(), b in vec3()) {
                let w = LossWeights { lambda_dis: 0.0, lambda_dir: 1.0, lambda_dis_exp: 0.0, beta: 0.0 };
                let t = retarget_term(a, b, &w);
                prop_assert!((0.0..=2.0 + 1e-12).contains(&t));
            }

            #[test]
            fn kl_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 4), lv in prop::collection::vec(-4.0f64..4.0, 4)) {
                let c = LatentCode { z: mu.clone(), mu, log_var: lv };
                prop_assert!(kl_loss(&[c]) >= 0.0);
            }
        }
    }
}
