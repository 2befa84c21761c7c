//! Inference-time routing between a student and a teacher.
//!
//! The student always runs first (softmax at temperature 1). A
//! [`DelegationPolicy`] looks at the student's output and decides whether its
//! prediction is final or whether the teacher is consulted.

use std::fmt;

use crate::distill::Variant;
use crate::error::{Error, Result};
use crate::nn::{self, argmax, top_two_gap, Network, ProbDist};

/// How the student's output slots map onto the original `L` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSpace {
    /// `L` slots, slot `k` is class `k`.
    Full { num_classes: usize },
    /// `|l_in|` slots, slot `k` is the `k`-th smallest class of `l_in`.
    Restricted { l_in: Vec<usize> },
    /// Restricted slots plus a trailing abstain slot.
    RestrictedAbstain { l_in: Vec<usize> },
    /// `L` slots plus a trailing abstain slot.
    FullAbstain { num_classes: usize },
}

impl LabelSpace {
    pub fn for_variant(variant: Variant, num_classes: usize, l_in: &[usize]) -> Self {
        let mut l_in = l_in.to_vec();
        l_in.sort_unstable();
        l_in.dedup();
        match variant {
            Variant::Baseline | Variant::Cd1 | Variant::MdLs => LabelSpace::Full { num_classes },
            Variant::Cd2 => LabelSpace::Restricted { l_in },
            Variant::Cd3 => LabelSpace::RestrictedAbstain { l_in },
            Variant::MdAbstain => LabelSpace::FullAbstain { num_classes },
        }
    }

    pub fn width(&self) -> usize {
        match self {
            LabelSpace::Full { num_classes } => *num_classes,
            LabelSpace::Restricted { l_in } => l_in.len(),
            LabelSpace::RestrictedAbstain { l_in } => l_in.len() + 1,
            LabelSpace::FullAbstain { num_classes } => num_classes + 1,
        }
    }

    pub fn has_abstain(&self) -> bool {
        matches!(
            self,
            LabelSpace::RestrictedAbstain { .. } | LabelSpace::FullAbstain { .. }
        )
    }

    /// Original class for an output slot; `None` for the abstain slot.
    pub fn class_of(&self, slot: usize) -> Option<usize> {
        match self {
            LabelSpace::Full { num_classes } => (slot < *num_classes).then_some(slot),
            LabelSpace::Restricted { l_in } | LabelSpace::RestrictedAbstain { l_in } => {
                l_in.get(slot).copied()
            }
            LabelSpace::FullAbstain { num_classes } => (slot < *num_classes).then_some(slot),
        }
    }

    fn margin_defined(&self) -> bool {
        self.width() >= 2
    }
}

/// Who made the final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decider {
    Student,
    Teacher,
}

impl fmt::Display for Decider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decider::Student => "student",
            Decider::Teacher => "teacher",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DelegationPolicy {
    /// Keep the student's answer iff it predicts a class in `l_in`.
    ClassBased { l_in: Vec<usize> },
    /// Keep the student's answer iff its margin is at least `rho`.
    MarginBased { rho: f64 },
    /// Delegate iff the student's argmax is the abstain slot.
    AbstainBased,
    /// Keep the student's answer iff it predicts a real class with margin at least `rho`.
    AbstainMargin { rho: f64 },
}

impl DelegationPolicy {
    pub fn rho(&self) -> Option<f64> {
        match self {
            DelegationPolicy::MarginBased { rho } | DelegationPolicy::AbstainMargin { rho } => {
                Some(*rho)
            }
            _ => None,
        }
    }

    /// Rejects combinations that cannot be evaluated.
    pub fn check(&self, space: &LabelSpace) -> Result<()> {
        if let Some(rho) = self.rho() {
            if rho.is_nan() || rho < 0.0 {
                return Err(Error::config(format!("rho must be >= 0, got {rho}")));
            }
        }
        match self {
            DelegationPolicy::ClassBased { l_in } if l_in.is_empty() => Err(Error::config(
                "class-based delegation needs a nonempty l_in",
            )),
            DelegationPolicy::MarginBased { .. } if !space.margin_defined() => Err(Error::config(
                "margin-based delegation needs at least two student outputs",
            )),
            DelegationPolicy::AbstainBased | DelegationPolicy::AbstainMargin { .. }
                if !space.has_abstain() =>
            {
                Err(Error::config(
                    "abstain delegation needs a student with an abstain slot",
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Cached view of one student forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    /// Softmax at temperature 1 over the student's slots.
    pub probs: Vec<f64>,
    /// Argmax mapped to an original class; `None` when the abstain slot wins.
    pub class: Option<usize>,
    /// Top-1 minus top-2 probability; NaN for single-output students.
    pub margin: f64,
}

impl StudentOutput {
    pub fn from_logits(space: &LabelSpace, logits: &[f64]) -> Result<Self> {
        if logits.len() != space.width() {
            return Err(Error::config(format!(
                "student outputs {} scores, label space needs {}",
                logits.len(),
                space.width()
            )));
        }
        let probs = nn::softmax(logits, 1.0)?.into_vec();
        let class = space.class_of(argmax(&probs));
        let margin = top_two_gap(&probs).unwrap_or(f64::NAN);
        Ok(StudentOutput {
            probs,
            class,
            margin,
        })
    }

    pub fn abstained(&self) -> bool {
        self.class.is_none()
    }
}

/// Applies `policy` to a cached student output.
pub fn route(policy: &DelegationPolicy, out: &StudentOutput) -> Decider {
    let keep = match policy {
        DelegationPolicy::ClassBased { l_in } => out.class.is_some_and(|c| l_in.contains(&c)),
        // An abstain argmax can never be emitted, so it always delegates.
        DelegationPolicy::MarginBased { rho } => out.class.is_some() && out.margin >= *rho,
        DelegationPolicy::AbstainBased => out.class.is_some(),
        DelegationPolicy::AbstainMargin { rho } => out.class.is_some() && out.margin >= *rho,
    };
    if keep {
        Decider::Student
    } else {
        Decider::Teacher
    }
}

/// Top-1 minus top-2 probability of a student distribution.
pub fn student_margin(dist: &ProbDist) -> Result<f64> {
    dist.margin()
}

pub fn delegate_class_based(student_logits: &[f64], l_in: &[usize]) -> Decider {
    if l_in.contains(&argmax(student_logits)) {
        Decider::Student
    } else {
        Decider::Teacher
    }
}

/// Student iff margin >= rho.
pub fn delegate_margin_based(student_dist: &ProbDist, rho: f64) -> Result<Decider> {
    Ok(if student_margin(student_dist)? >= rho {
        Decider::Student
    } else {
        Decider::Teacher
    })
}

/// Teacher iff the trailing abstain slot is the (lowest-index) argmax.
pub fn delegate_abstain(student_dist: &ProbDist) -> Result<Decider> {
    if student_dist.len() < 2 {
        return Err(Error::invalid(
            "abstain delegation needs at least two slots",
        ));
    }
    Ok(if student_dist.argmax() == student_dist.len() - 1 {
        Decider::Teacher
    } else {
        Decider::Student
    })
}

/// Student iff the argmax is a real class and the margin over all slots
/// (abstain included) is at least `rho`.
pub fn delegate_abstain_margin(student_dist: &ProbDist, rho: f64) -> Result<Decider> {
    if delegate_abstain(student_dist)? == Decider::Teacher {
        return Ok(Decider::Teacher);
    }
    delegate_margin_based(student_dist, rho)
}

/// The fallback model: a trained network or an idealized label oracle.
#[derive(Debug, Clone)]
pub enum TeacherOracle {
    Trained(Network),
    /// Puts mass `eta` on the true label and spreads the rest uniformly.
    Oracle {
        eta: f64,
        num_classes: usize,
    },
}

impl TeacherOracle {
    pub fn oracle(eta: f64, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("oracle teacher needs at least two classes"));
        }
        if !(eta > 1.0 / num_classes as f64 && eta <= 1.0) {
            return Err(Error::config(format!(
                "oracle confidence must lie in (1/L, 1], got {eta}"
            )));
        }
        Ok(TeacherOracle::Oracle { eta, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TeacherOracle::Trained(net) => net.output_width(),
            TeacherOracle::Oracle { num_classes, .. } => *num_classes,
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, TeacherOracle::Oracle { .. })
    }

    fn oracle_label(label: Option<usize>, num_classes: usize) -> Result<usize> {
        let y = label.ok_or_else(|| Error::invalid("oracle teacher needs the true label"))?;
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        Ok(y)
    }

    pub fn distribution(&self, x: &[f64], label: Option<usize>) -> Result<ProbDist> {
        match self {
            TeacherOracle::Trained(net) => nn::softmax(net.forward(x)?.as_slice(), 1.0),
            TeacherOracle::Oracle { eta, num_classes } => {
                let y = Self::oracle_label(label, *num_classes)?;
                let rest = (1.0 - eta) / (*num_classes - 1) as f64;
                let mut probs = vec![rest; *num_classes];
                probs[y] = *eta;
                ProbDist::new(probs)
            }
        }
    }

    /// Scores suitable for a score cache. For the oracle these are clamped
    /// log-probabilities, so their softmax reproduces the oracle distribution.
    pub fn logits(&self, x: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
        match self {
            TeacherOracle::Trained(net) => Ok(net.forward(x)?.into_vec()),
            TeacherOracle::Oracle { .. } => Ok(self
                .distribution(x, label)?
                .as_slice()
                .iter()
                .map(|p| p.max(1e-300).ln())
                .collect()),
        }
    }

    /// Argmax over the original `L` classes.
    pub fn predict(&self, x: &[f64], label: Option<usize>) -> Result<usize> {
        match self {
            TeacherOracle::Trained(net) => Ok(net.forward(x)?.argmax()),
            TeacherOracle::Oracle { num_classes, .. } => Self::oracle_label(label, *num_classes),
        }
    }

    /// Multiply-accumulate count of one teacher call (zero for the oracle).
    pub fn macs(&self) -> u64 {
        match self {
            TeacherOracle::Trained(net) => net.macs(),
            TeacherOracle::Oracle { .. } => 0,
        }
    }
}

/// Outcome of two-stage inference on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub final_label: usize,
    pub decider: Decider,
    pub student_margin: f64,
    /// The student's argmax was the abstain slot.
    pub abstained: bool,
}

/// Validates that a student/teacher/policy combination is usable.
pub fn check_cascade(
    student: &Network,
    space: &LabelSpace,
    teacher: &TeacherOracle,
    policy: &DelegationPolicy,
) -> Result<()> {
    if student.output_width() != space.width() {
        return Err(Error::config(format!(
            "student outputs {} scores, label space needs {}",
            student.output_width(),
            space.width()
        )));
    }
    let num_classes = teacher.num_classes();
    let max_class = match space {
        LabelSpace::Full { num_classes } | LabelSpace::FullAbstain { num_classes } => {
            num_classes.checked_sub(1)
        }
        LabelSpace::Restricted { l_in } | LabelSpace::RestrictedAbstain { l_in } => {
            l_in.last().copied()
        }
    };
    match max_class {
        Some(c) if c < num_classes => {}
        _ => {
            return Err(Error::config(format!(
                "student label space does not fit the teacher's {num_classes} classes"
            )))
        }
    }
    if let TeacherOracle::Trained(net) = teacher {
        if net.input_width() != student.input_width() {
            return Err(Error::config("student and teacher input widths differ"));
        }
    }
    policy.check(space)
}

/// Runs the student, applies `policy`, and consults the teacher if needed.
/// `label` is only read by an oracle teacher.
pub fn two_stage_predict(
    student: &Network,
    space: &LabelSpace,
    teacher: &TeacherOracle,
    policy: &DelegationPolicy,
    x: &[f64],
    label: Option<usize>,
) -> Result<Decision> {
    check_cascade(student, space, teacher, policy)?;
    let out = StudentOutput::from_logits(space, student.forward(x)?.as_slice())?;
    let decider = route(policy, &out);
    let final_label = match decider {
        Decider::Student => out.class.expect("student decides only on real classes"),
        Decider::Teacher => teacher.predict(x, label)?,
    };
    Ok(Decision {
        final_label,
        decider,
        student_margin: out.margin,
        abstained: out.abstained(),
    })
}

/// Reject-option outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectOutcome {
    Predict(usize),
    Abstain,
}

/// Bayes rule for classification with rejection cost `c`: abstain iff the
/// largest posterior is at most `1 - c`.
pub fn bayes_reject(posterior: &ProbDist, c: f64) -> Result<RejectOutcome> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!(
            "rejection cost must lie in (0, 1], got {c}"
        )));
    }
    let best = posterior.argmax();
    Ok(if posterior.as_slice()[best] <= 1.0 - c {
        RejectOutcome::Abstain
    } else {
        RejectOutcome::Predict(best)
    })
}
