//! Hand kinematic descriptions and differentiable forward kinematics.
//!
//! A [`HandSpec`] is a tree of revolute joints with fixed origins, optional
//! mimic couplings and fingertip frames attached to joints. Fingertip
//! positions are expressed in a canonical palm frame shared by all hands:
//! palm normal +z, finger extension +x, thumb side +y. Each spec carries a
//! `base_frame` that places its native root in that frame.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum HandError {
    #[error("malformed hand spec: {0}")]
    Parse(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("hand spec has no joints")]
    NoJoints,
    #[error("joint `{0}` is defined more than once")]
    DuplicateJoint(String),
    #[error("joint `{joint}` names unknown parent `{parent}`")]
    UnknownParent { joint: String, parent: String },
    #[error("joint tree has a cycle through `{0}`")]
    Cycle(String),
    #[error("mimic joint `{joint}` references `{source_joint}`, which is not an actuated joint defined earlier")]
    UnknownMimicSource { joint: String, source_joint: String },
    #[error("joint `{joint}` axis has norm {norm}, expected 1")]
    NonUnitAxis { joint: String, norm: f64 },
    #[error("joint `{joint}` limits [{lo}, {hi}] are inverted or empty")]
    InvertedLimits { joint: String, lo: f64, hi: f64 },
    #[error("mimic joint `{joint}` reaches [{lo}, {hi}] outside its limits [{limit_lo}, {limit_hi}]")]
    MimicOutOfLimits {
        joint: String,
        lo: f64,
        hi: f64,
        limit_lo: f64,
        limit_hi: f64,
    },
    #[error("hand spec has no thumb")]
    MissingThumb,
    #[error("digit {digit} is attached to unknown joint `{joint}`")]
    UnknownDigitJoint { digit: Digit, joint: String },
    #[error("non-finite value in field `{0}`")]
    NonFinite(String),
    #[error("hand `{hand}` has no {digit} digit")]
    MissingDigit { hand: String, digit: Digit },
    #[error("pose for hand `{pose_hand}` given to hand `{hand}`")]
    WrongHand { hand: String, pose_hand: String },
    #[error("hand `{hand}` expects {expected} joint values, got {got}")]
    Dimension {
        hand: String,
        expected: usize,
        got: usize,
    },
    #[error("joint `{joint}` value {value} outside limits [{lo}, {hi}]")]
    OutOfLimits {
        joint: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T, E = HandError> = std::result::Result<T, E>;

/// Canonical digit names, ordered thumb to little.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Digit {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Digit {
    pub const ALL: [Digit; 5] = [Digit::Thumb, Digit::Index, Digit::Middle, Digit::Ring, Digit::Little];

    pub fn as_str(self) -> &'static str {
        match self {
            Digit::Thumb => "thumb",
            Digit::Index => "index",
            Digit::Middle => "middle",
            Digit::Ring => "ring",
            Digit::Little => "little",
        }
    }
}

impl fmt::Display for Digit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Digit {
    type Err = HandError;

    fn from_str(s: &str) -> Result<Self> {
        Digit::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| HandError::Parse(format!("unknown digit `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Actuation {
    Actuated,
    Mimic {
        source: String,
        multiplier: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDef {
    pub name: String,
    /// `None` attaches the joint to the hand root.
    pub parent: Option<String>,
    pub origin_translation: [f64; 3],
    pub origin_rotation: [f64; 3],
    pub axis: [f64; 3],
    pub limits: (f64, f64),
    pub actuation: Actuation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingertipFrame {
    pub joint: String,
    pub offset: [f64; 3],
}

/// Rigid transform given as roll-pitch-yaw (radians) and translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub rpy: [f64; 3],
    pub xyz: [f64; 3],
}

/// A joint-position vector in actuated coordinates (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct JointPose {
    pub hand: String,
    pub values: Vec<f64>,
}

/// Per-joint constants for FK: `R_o`, `R_o K`, `R_o K²` and the origin offset.
#[derive(Debug, Clone)]
struct JointKinematics {
    m0: [f64; 9],
    m1: [f64; 9],
    m2: [f64; 9],
    xyz: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct MimicMap {
    coordinate: usize,
    multiplier: f64,
    offset: f64,
}

/// Validated kinematic description of one hand.
#[derive(Debug, Clone)]
pub struct HandSpec {
    name: String,
    base_frame: Frame,
    joints: Vec<JointDef>,
    digits: BTreeMap<Digit, FingertipFrame>,
    parent: Vec<Option<usize>>,
    order: Vec<usize>,
    /// Joint index of each actuated coordinate.
    actuated: Vec<usize>,
    /// For each joint: actuated coordinate it reads, with affine coupling.
    coupling: Vec<MimicMap>,
    digit_joint: BTreeMap<Digit, usize>,
    kinematics: Vec<JointKinematics>,
    base: [f64; 9],
}

// Document schema.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HandDoc {
    name: String,
    base_frame: Frame,
    joints: Vec<JointDoc>,
    digits: DigitsDoc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    xyz: [f64; 3],
    rpy: [f64; 3],
    axis: [f64; 3],
    limits: [f64; 2],
    #[serde(default)]
    mimic: Option<MimicDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MimicDoc {
    source: String,
    multiplier: f64,
    offset: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DigitsDoc {
    thumb: Option<TipDoc>,
    index: Option<TipDoc>,
    middle: Option<TipDoc>,
    ring: Option<TipDoc>,
    little: Option<TipDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TipDoc {
    joint: String,
    offset: [f64; 3],
}

const ROOT_NAMES: [&str; 2] = ["root", ""];

/// Row-major rotation `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rpy_matrix(rpy: [f64; 3]) -> [f64; 9] {
    let (sr, cr) = rpy[0].sin_cos();
    let (sp, cp) = rpy[1].sin_cos();
    let (sy, cy) = rpy[2].sin_cos();
    [
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    ]
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

fn skew(a: [f64; 3]) -> [f64; 9] {
    [0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0]
}

fn finite(field: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HandError::NonFinite(field.to_string()))
    }
}

impl HandSpec {
    pub fn from_json_str(document: &str) -> Result<Self> {
        let doc: HandDoc = serde_json::from_str(document).map_err(|e| HandError::Parse(e.to_string()))?;
        let digits_doc = [
            (Digit::Thumb, doc.digits.thumb),
            (Digit::Index, doc.digits.index),
            (Digit::Middle, doc.digits.middle),
            (Digit::Ring, doc.digits.ring),
            (Digit::Little, doc.digits.little),
        ];
        let joints = doc
            .joints
            .into_iter()
            .map(|j| JointDef {
                name: j.name,
                parent: j.parent.filter(|p| !ROOT_NAMES.contains(&p.as_str())),
                origin_translation: j.xyz,
                origin_rotation: j.rpy,
                axis: j.axis,
                limits: (j.limits[0], j.limits[1]),
                actuation: match j.mimic {
                    None => Actuation::Actuated,
                    Some(m) => Actuation::Mimic {
                        source: m.source,
                        multiplier: m.multiplier,
                        offset: m.offset,
                    },
                },
            })
            .collect();
        let digits = digits_doc
            .into_iter()
            .filter_map(|(d, tip)| {
                tip.map(|t| {
                    (
                        d,
                        FingertipFrame {
                            joint: t.joint,
                            offset: t.offset,
                        },
                    )
                })
            })
            .collect();
        Self::new(doc.name, doc.base_frame, joints, digits)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HandError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Validates a description and precomputes its kinematic constants.
    pub fn new(
        name: String,
        base_frame: Frame,
        joints: Vec<JointDef>,
        digits: BTreeMap<Digit, FingertipFrame>,
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(HandError::NoJoints);
        }
        finite("base_frame", &base_frame.rpy)?;
        finite("base_frame", &base_frame.xyz)?;

        let mut index = HashMap::with_capacity(joints.len());
        for (i, j) in joints.iter().enumerate() {
            if index.insert(j.name.as_str(), i).is_some() {
                return Err(HandError::DuplicateJoint(j.name.clone()));
            }
            finite(&j.name, &j.origin_translation)?;
            finite(&j.name, &j.origin_rotation)?;
            finite(&j.name, &j.axis)?;
            finite(&j.name, &[j.limits.0, j.limits.1])?;
            let norm = j.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(HandError::NonUnitAxis {
                    joint: j.name.clone(),
                    norm,
                });
            }
            if !(j.limits.0 < j.limits.1) {
                return Err(HandError::InvertedLimits {
                    joint: j.name.clone(),
                    lo: j.limits.0,
                    hi: j.limits.1,
                });
            }
        }

        let parent = joints
            .iter()
            .map(|j| match &j.parent {
                None => Ok(None),
                Some(p) => index.get(p.as_str()).map(|&i| Some(i)).ok_or_else(|| HandError::UnknownParent {
                    joint: j.name.clone(),
                    parent: p.clone(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let order = topological_order(&joints, &parent)?;

        let mut actuated = Vec::new();
        let mut coupling = Vec::with_capacity(joints.len());
        let mut coordinate_of = HashMap::new();
        for (i, j) in joints.iter().enumerate() {
            match &j.actuation {
                Actuation::Actuated => {
                    coordinate_of.insert(j.name.as_str(), actuated.len());
                    coupling.push(MimicMap {
                        coordinate: actuated.len(),
                        multiplier: 1.0,
                        offset: 0.0,
                    });
                    actuated.push(i);
                }
                Actuation::Mimic {
                    source,
                    multiplier,
                    offset,
                } => {
                    finite(&j.name, &[*multiplier, *offset])?;
                    let &coordinate =
                        coordinate_of
                            .get(source.as_str())
                            .ok_or_else(|| HandError::UnknownMimicSource {
                                joint: j.name.clone(),
                                source_joint: source.clone(),
                            })?;
                    let (slo, shi) = joints[actuated[coordinate]].limits;
                    let a = multiplier * slo + offset;
                    let b = multiplier * shi + offset;
                    let (lo, hi) = (a.min(b), a.max(b));
                    let tol = 1e-12 * (1.0 + j.limits.0.abs().max(j.limits.1.abs()));
                    if lo < j.limits.0 - tol || hi > j.limits.1 + tol {
                        return Err(HandError::MimicOutOfLimits {
                            joint: j.name.clone(),
                            lo,
                            hi,
                            limit_lo: j.limits.0,
                            limit_hi: j.limits.1,
                        });
                    }
                    coupling.push(MimicMap {
                        coordinate,
                        multiplier: *multiplier,
                        offset: *offset,
                    });
                }
            }
        }

        if !digits.contains_key(&Digit::Thumb) {
            return Err(HandError::MissingThumb);
        }
        let mut digit_joint = BTreeMap::new();
        for (&d, tip) in &digits {
            finite(d.as_str(), &tip.offset)?;
            let &j = index.get(tip.joint.as_str()).ok_or_else(|| HandError::UnknownDigitJoint {
                digit: d,
                joint: tip.joint.clone(),
            })?;
            digit_joint.insert(d, j);
        }

        let kinematics = joints
            .iter()
            .map(|j| {
                let ro = rpy_matrix(j.origin_rotation);
                let k = skew(j.axis);
                let k2 = mat3_mul(&k, &k);
                JointKinematics {
                    m0: ro,
                    m1: mat3_mul(&ro, &k),
                    m2: mat3_mul(&ro, &k2),
                    xyz: j.origin_translation,
                }
            })
            .collect();

        Ok(HandSpec {
            base: rpy_matrix(base_frame.rpy),
            name,
            base_frame,
            joints,
            digits,
            parent,
            order,
            actuated,
            coupling,
            digit_joint,
            kinematics,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_frame(&self) -> Frame {
        self.base_frame
    }

    pub fn joints(&self) -> &[JointDef] {
        &self.joints
    }

    pub fn fingertips(&self) -> &BTreeMap<Digit, FingertipFrame> {
        &self.digits
    }

    /// Digits present on this hand, thumb first.
    pub fn digits(&self) -> Vec<Digit> {
        self.digits.keys().copied().collect()
    }

    pub fn has_digit(&self, digit: Digit) -> bool {
        self.digits.contains_key(&digit)
    }

    /// Number of actuated (non-mimic) joints, the pose dimension.
    pub fn actuated_dof(&self) -> usize {
        self.actuated.len()
    }

    pub fn total_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn mimic_count(&self) -> usize {
        self.joints.len() - self.actuated.len()
    }

    /// Limits of the actuated coordinates, in pose order.
    pub fn actuated_limits(&self) -> Vec<(f64, f64)> {
        self.actuated.iter().map(|&i| self.joints[i].limits).collect()
    }

    pub fn actuated_names(&self) -> Vec<&str> {
        self.actuated.iter().map(|&i| self.joints[i].name.as_str()).collect()
    }

    fn check_dimension(&self, len: usize) -> Result<()> {
        if len != self.actuated_dof() {
            return Err(HandError::Dimension {
                hand: self.name.clone(),
                expected: self.actuated_dof(),
                got: len,
            });
        }
        Ok(())
    }

    fn check_pose(&self, pose: &JointPose) -> Result<()> {
        if pose.hand != self.name {
            return Err(HandError::WrongHand {
                hand: self.name.clone(),
                pose_hand: pose.hand.clone(),
            });
        }
        self.check_dimension(pose.values.len())
    }

    /// Builds a pose that must lie inside the joint limits.
    pub fn pose(&self, values: Vec<f64>) -> Result<JointPose> {
        self.check_dimension(values.len())?;
        for (&j, &v) in self.actuated.iter().zip(&values) {
            let (lo, hi) = self.joints[j].limits;
            if !(lo..=hi).contains(&v) {
                return Err(HandError::OutOfLimits {
                    joint: self.joints[j].name.clone(),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(JointPose {
            hand: self.name.clone(),
            values,
        })
    }

    /// Builds a pose, clamping each value into its limits.
    pub fn pose_clamped(&self, mut values: Vec<f64>) -> Result<JointPose> {
        self.check_dimension(values.len())?;
        for ((lo, hi), v) in self.actuated_limits().into_iter().zip(values.iter_mut()) {
            *v = v.clamp(lo, hi);
        }
        Ok(JointPose {
            hand: self.name.clone(),
            values,
        })
    }

    /// Expands actuated coordinates to one angle per joint.
    pub fn expand_mimic(&self, pose: &JointPose) -> Result<Vec<f64>> {
        self.check_pose(pose)?;
        Ok(self
            .coupling
            .iter()
            .map(|c| c.multiplier * pose.values[c.coordinate] + c.offset)
            .collect())
    }

    /// Fingertip positions (meters, palm frame) for one pose.
    pub fn forward_kinematics(&self, pose: &JointPose) -> Result<BTreeMap<Digit, [f64; 3]>> {
        self.check_pose(pose)?;
        let rows = self.fingertip_positions(std::slice::from_ref(&pose.values))?;
        Ok(self.digits.keys().copied().zip(rows.into_iter().next().unwrap_or_default()).collect())
    }

    /// Fingertip positions for a batch of actuated vectors, digits in
    /// [`HandSpec::digits`] order.
    pub fn fingertip_positions(&self, poses: &[Vec<f64>]) -> Result<Vec<Vec<[f64; 3]>>> {
        for p in poses {
            self.check_dimension(p.len())?;
        }
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::from_rows(poses)?);
        let tips = self.fk_on_tape(&mut tape, input)?;
        let mut out = vec![Vec::with_capacity(tips.len()); poses.len()];
        for var in tips.values() {
            let data = tape.value(*var)?.data();
            for (b, row) in out.iter_mut().enumerate() {
                row.push([data[3 * b], data[3 * b + 1], data[3 * b + 2]]);
            }
        }
        Ok(out)
    }

    /// δ_ij = p_i − p_j.
    pub fn fingertip_displacement(&self, pose: &JointPose, i: Digit, j: Digit) -> Result<[f64; 3]> {
        for d in [i, j] {
            if !self.has_digit(d) {
                return Err(HandError::MissingDigit {
                    hand: self.name.clone(),
                    digit: d,
                });
            }
        }
        let tips = self.forward_kinematics(pose)?;
        let (pi, pj) = (tips[&i], tips[&j]);
        Ok([pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]])
    }

    /// Draws each actuated value uniformly within its limits.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> JointPose {
        JointPose {
            hand: self.name.clone(),
            values: sample_within(&self.actuated_limits(), rng),
        }
    }

    /// Records batched FK on `tape`.
    ///
    /// `pose` is `[batch, actuated_dof]` in radians; each returned var is the
    /// `[batch, 3]` position of one fingertip in the palm frame.
    pub fn fk_on_tape(&self, tape: &mut Tape, pose: Var) -> Result<BTreeMap<Digit, Var>> {
        let shape = tape.value(pose)?.shape().to_vec();
        let batch = match shape.as_slice() {
            [b, d] if *d == self.actuated_dof() => *b,
            _ => {
                return Err(HandError::Dimension {
                    hand: self.name.clone(),
                    expected: self.actuated_dof(),
                    got: shape.last().copied().unwrap_or(0),
                })
            }
        };
        let root_r = tape.constant(tile(&self.base, batch));
        let root_t = tape.constant(tile(&self.base_frame.xyz, batch));

        let coords = (0..self.actuated_dof())
            .map(|c| tape.slice(pose, 1, c, c + 1))
            .collect::<Result<Vec<_>, _>>()?;

        let mut frames: Vec<Option<(Var, Var)>> = vec![None; self.joints.len()];
        for &j in &self.order {
            let (pr, pt) = match self.parent[j] {
                Some(p) => frames[p].expect("parents precede children in topological order"),
                None => (root_r, root_t),
            };
            let c = self.coupling[j];
            let mut angle = coords[c.coordinate];
            if c.multiplier != 1.0 {
                angle = tape.scale(angle, c.multiplier)?;
            }
            if c.offset != 0.0 {
                angle = tape.offset(angle, c.offset)?;
            }
            let kin = &self.kinematics[j];
            let pr3 = tape.reshape(pr, &[3 * batch, 3])?;
            let rotate = |tape: &mut Tape, m: &[f64; 9]| -> Result<Var, GradError> {
                let m = tape.constant(Tensor::new(vec![3, 3], m.to_vec())?);
                let prod = tape.matmul(pr3, m)?;
                tape.reshape(prod, &[batch, 9])
            };
            // R_parent R_o (I + sinθ K + (1 − cosθ) K²)
            let a0 = rotate(tape, &kin.m0)?;
            let a1 = rotate(tape, &kin.m1)?;
            let a2 = rotate(tape, &kin.m2)?;
            let sin = tape.sin(angle)?;
            let cos = tape.cos(angle)?;
            let versine = tape.scale(cos, -1.0)?;
            let versine = tape.offset(versine, 1.0)?;
            let sin = tape.broadcast(sin, &[batch, 9])?;
            let versine = tape.broadcast(versine, &[batch, 9])?;
            let t1 = tape.mul(sin, a1)?;
            let t2 = tape.mul(versine, a2)?;
            let r = tape.add(a0, t1)?;
            let r = tape.add(r, t2)?;

            let t = apply_offset(tape, pr3, pt, kin.xyz, batch)?;
            frames[j] = Some((r, t));
        }

        let mut tips = BTreeMap::new();
        for (&d, tip) in &self.digits {
            let (r, t) = frames[self.digit_joint[&d]].expect("every joint has a frame");
            let r3 = tape.reshape(r, &[3 * batch, 3])?;
            tips.insert(d, apply_offset(tape, r3, t, tip.offset, batch)?);
        }
        Ok(tips)
    }
}

/// `t + R v` for a batch of frames with `R` given as `[3 batch, 3]`.
fn apply_offset(tape: &mut Tape, r3: Var, t: Var, v: [f64; 3], batch: usize) -> Result<Var, GradError> {
    if v == [0.0; 3] {
        return Ok(t);
    }
    let v = tape.constant(Tensor::new(vec![3, 1], v.to_vec())?);
    let rv = tape.matmul(r3, v)?;
    let rv = tape.reshape(rv, &[batch, 3])?;
    tape.add(t, rv)
}

fn tile(row: &[f64], times: usize) -> Tensor {
    let data = row.iter().copied().cycle().take(row.len() * times).collect();
    Tensor::new(vec![times, row.len()], data).expect("tiled length matches shape")
}

fn topological_order(joints: &[JointDef], parent: &[Option<usize>]) -> Result<Vec<usize>> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; joints.len()];
    let mut order = Vec::with_capacity(joints.len());
    for start in 0..joints.len() {
        let mut chain = Vec::new();
        let mut cur = Some(start);
        while let Some(j) = cur {
            match state[j] {
                2 => break,
                1 => return Err(HandError::Cycle(joints[j].name.clone())),
                _ => {
                    state[j] = 1;
                    chain.push(j);
                    cur = parent[j];
                }
            }
        }
        for &j in chain.iter().rev() {
            state[j] = 2;
            order.push(j);
        }
    }
    Ok(order)
}

/// Uniform draw in each interval; a degenerate `[a, a]` interval yields `a`.
pub fn sample_within<R: Rng + ?Sized>(limits: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    limits
        .iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    pub(crate) fn planar_doc(mimic: Option<(f64, f64)>) -> String {
        let mimic = match mimic {
            Some((m, o)) => format!(
                r#",{{"name":"dip","parent":"pip","xyz":[0.03,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-3,3],"mimic":{{"source":"mcp","multiplier":{m},"offset":{o}}}}}"#
            ),
            None => String::new(),
        };
        format!(
            r#"{{"name":"planar","base_frame":{{"rpy":[0,0,0],"xyz":[0,0,0]}},
            "joints":[
              {{"name":"mcp","parent":null,"xyz":[0,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-2,2]}},
              {{"name":"pip","parent":"mcp","xyz":[0.04,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-2,2]}}
              {mimic}
            ],
            "digits":{{"thumb":{{"joint":"pip","offset":[0.03,0,0]}},"index":{{"joint":"mcp","offset":[0.01,0,0]}}}}}}"#
        )
    }

    fn planar() -> HandSpec {
        HandSpec::from_json_str(&planar_doc(None)).unwrap()
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn parses_minimal_spec() {
        let spec = planar();
        assert_eq!(spec.actuated_dof(), 2);
        assert_eq!(spec.total_joints(), 2);
        assert_eq!(spec.digits(), vec![Digit::Thumb, Digit::Index]);
    }

    #[test]
    fn mimic_adds_expanded_joint() {
        let spec = HandSpec::from_json_str(&planar_doc(Some((1.0, 0.0)))).unwrap();
        assert_eq!(spec.actuated_dof(), 2);
        assert_eq!(spec.total_joints(), 3);
        assert_eq!(spec.mimic_count(), 1);
    }

    #[test]
    fn expand_mimic_cases() {
        let single = |m: f64, o: f64| {
            let doc = format!(
                r#"{{"name":"h","base_frame":{{"rpy":[0,0,0],"xyz":[0,0,0]}},"joints":[
                {{"name":"a","xyz":[0,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[0,1]}},
                {{"name":"b","parent":"a","xyz":[0.01,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-1,3],"mimic":{{"source":"a","multiplier":{m},"offset":{o}}}}}],
                "digits":{{"thumb":{{"joint":"b","offset":[0.01,0,0]}}}}}}"#
            );
            HandSpec::from_json_str(&doc).unwrap()
        };
        let spec = single(1.0, 0.0);
        let pose = spec.pose(vec![0.5]).unwrap();
        assert_eq!(spec.expand_mimic(&pose).unwrap(), vec![0.5, 0.5]);

        let spec = single(2.0, 0.1);
        let pose = spec.pose(vec![0.3]).unwrap();
        let out = spec.expand_mimic(&pose).unwrap();
        assert_eq!(out[0], 0.3);
        assert!((out[1] - (2.0 * 0.3 + 0.1)).abs() < 1e-15);

        let spec = planar();
        let pose = spec.pose(vec![0.2, -0.4]).unwrap();
        assert_eq!(spec.expand_mimic(&pose).unwrap(), vec![0.2, -0.4]);
        assert!(matches!(
            spec.expand_mimic(&JointPose {
                hand: "planar".into(),
                values: vec![0.1]
            }),
            Err(HandError::Dimension { .. })
        ));
    }

    #[test]
    fn planar_chain_positions() {
        let spec = planar();
        let tip = |a: f64, b: f64| {
            let pose = spec.pose(vec![a, b]).unwrap();
            spec.forward_kinematics(&pose).unwrap()[&Digit::Thumb]
        };
        assert!(close(tip(0.0, 0.0), [0.07, 0.0, 0.0], 1e-15));
        // oracle: manual 2D composition
        let manual = |a: f64, b: f64| {
            [
                0.04 * a.cos() + 0.03 * (a + b).cos(),
                0.04 * a.sin() + 0.03 * (a + b).sin(),
                0.0,
            ]
        };
        assert!(close(tip(FRAC_PI_2, 0.0), [0.0, 0.07, 0.0], 1e-12));
        assert!(close(tip(FRAC_PI_2, -FRAC_PI_2), [0.03, 0.04, 0.0], 1e-12));
        assert!(close(tip(0.3, 0.9), manual(0.3, 0.9), 1e-12));
    }

    #[test]
    fn displacement_cases() {
        let spec = planar();
        let pose = spec.pose(vec![0.0, 0.0]).unwrap();
        assert_eq!(spec.fingertip_displacement(&pose, Digit::Thumb, Digit::Thumb).unwrap(), [0.0; 3]);
        // thumb at (0.07,0,0), index at (0.01,0,0)
        let d = spec.fingertip_displacement(&pose, Digit::Index, Digit::Thumb).unwrap();
        assert!(close(d, [-0.06, 0.0, 0.0], 1e-15));
        assert!(matches!(
            spec.fingertip_displacement(&pose, Digit::Thumb, Digit::Little),
            Err(HandError::MissingDigit {
                digit: Digit::Little,
                ..
            })
        ));
    }

    #[test]
    fn validation_errors_are_distinct() {
        let base = planar_doc(None);
        let cyc = base
            .replace(r#""name":"mcp","parent":null"#, r#""name":"mcp","parent":"pip""#);
        assert!(matches!(HandSpec::from_json_str(&cyc), Err(HandError::Cycle(_))));
        let axis = base.replacen(r#""axis":[0,0,1]"#, r#""axis":[0,0,2]"#, 1);
        assert!(matches!(HandSpec::from_json_str(&axis), Err(HandError::NonUnitAxis { .. })));
        let limits = base.replacen(r#""limits":[-2,2]"#, r#""limits":[2,-2]"#, 1);
        assert!(matches!(HandSpec::from_json_str(&limits), Err(HandError::InvertedLimits { .. })));
        let no_thumb = base.replace(r#""thumb":"#, r#""middle":"#);
        assert!(matches!(HandSpec::from_json_str(&no_thumb), Err(HandError::MissingThumb)));
        let mimic = planar_doc(Some((1.0, 0.0))).replace(r#""source":"mcp""#, r#""source":"nope""#);
        assert!(matches!(HandSpec::from_json_str(&mimic), Err(HandError::UnknownMimicSource { .. })));
        let mimic_range = planar_doc(Some((2.0, 0.0)));
        assert!(matches!(HandSpec::from_json_str(&mimic_range), Err(HandError::MimicOutOfLimits { .. })));
        let unknown = base.replace(r#""name":"planar","#, r#""name":"planar","color":"red","#);
        assert!(matches!(HandSpec::from_json_str(&unknown), Err(HandError::Parse(_))));
        let parent = base.replace(r#""parent":"mcp""#, r#""parent":"wrist""#);
        assert!(matches!(HandSpec::from_json_str(&parent), Err(HandError::UnknownParent { .. })));
    }

    #[test]
    fn joint_order_in_document_is_free() {
        let doc = r#"{"name":"r","base_frame":{"rpy":[0,0,0],"xyz":[0,0,0]},"joints":[
            {"name":"pip","parent":"mcp","xyz":[0.04,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-2,2]},
            {"name":"mcp","xyz":[0,0,0],"rpy":[0,0,0],"axis":[0,0,1],"limits":[-2,2]}],
            "digits":{"thumb":{"joint":"pip","offset":[0.03,0,0]}}}"#;
        let spec = HandSpec::from_json_str(doc).unwrap();
        let pose = spec.pose(vec![0.0, FRAC_PI_2]).unwrap();
        assert!(close(spec.forward_kinematics(&pose).unwrap()[&Digit::Thumb], [0.0, 0.07, 0.0], 1e-12));
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_within(&[(0.0, 0.0), (0.0, 0.0)], &mut rng), vec![0.0, 0.0]);

        let a = sample_within(&[(0.0, 1.0); 2], &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_within(&[(0.0, 1.0); 2], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));

        let draws: Vec<f64> = (0..10_000).map(|_| sample_within(&[(-1.0, 2.0)], &mut rng)[0]).collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(min >= -1.0 && max <= 2.0);
        assert!((mean - 0.5).abs() < 0.05);

        let spec = planar();
        let pose = spec.sample_pose(&mut rng);
        assert!(spec.pose(pose.values).is_ok());
    }

    #[test]
    fn pose_validation_and_clamping() {
        let spec = planar();
        assert!(matches!(spec.pose(vec![2.5, 0.0]), Err(HandError::OutOfLimits { .. })));
        assert_eq!(spec.pose_clamped(vec![2.5, -9.0]).unwrap().values, vec![2.0, -2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn displacement_is_antisymmetric(a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let spec = planar();
                let pose = spec.pose(vec![a, b]).unwrap();
                let ij = spec.fingertip_displacement(&pose, Digit::Thumb, Digit::Index).unwrap();
                let ji = spec.fingertip_displacement(&pose, Digit::Index, Digit::Thumb).unwrap();
                for k in 0..3 {
                    prop_assert_eq!(ij[k], -ji[k]);
                }
            }

            #[test]
            fn mimic_expansion_is_affine(
                q1 in prop::collection::vec(-0.5f64..0.5, 2),
                q2 in prop::collection::vec(-0.5f64..0.5, 2),
                a in -1.0f64..1.0,
                b in -1.0f64..1.0,
            ) {
                let spec = HandSpec::from_json_str(&planar_doc(Some((1.5, 0.0)))).unwrap();
                let mk = |v: Vec<f64>| JointPose { hand: "planar".into(), values: v };
                let mix: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| a * x + b * y).collect();
                let lhs = spec.expand_mimic(&mk(mix)).unwrap();
                let e1 = spec.expand_mimic(&mk(q1.clone())).unwrap();
                let e2 = spec.expand_mimic(&mk(q2.clone())).unwrap();
                for k in 0..lhs.len() {
                    prop_assert!((lhs[k] - (a * e1[k] + b * e2[k])).abs() < 1e-12);
                }
            }
        }
    }
}
