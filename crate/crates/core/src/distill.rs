//! Easy/hard partitions, pseudo-label construction for every distillation
//! variant, and the weighted true-label + distillation objective.
//!
//! Class indices are zero-based throughout. `l_in` is kept sorted and
//! deduplicated; restricted slot `k` always refers to the `k`-th smallest class
//! in `l_in`.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, softmax_cross_entropy, top_two_gap, Example, Network, ProbDist, TrainSpec};
use crate::par::{self, Exec};

/// Which pseudo-label construction a student is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain distillation on the full teacher softmax.
    Baseline,
    /// Teacher softmax on in-domain labels, label-smoothed one-hot elsewhere.
    Cd1,
    /// `L'`-way student on the restricted teacher softmax, uniform elsewhere.
    Cd2,
    /// `L'+1`-way student with an abstain slot for out-of-domain labels.
    Cd3,
    /// Teacher softmax on high-teacher-margin examples, label smoothing elsewhere.
    MdLs,
    /// `L+1`-way student; low-teacher-margin examples go to the abstain slot.
    MdAbstain,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Cd1,
        Variant::Cd2,
        Variant::Cd3,
        Variant::MdLs,
        Variant::MdAbstain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "BASELINE",
            Variant::Cd1 => "CD1",
            Variant::Cd2 => "CD2",
            Variant::Cd3 => "CD3",
            Variant::MdLs => "MD_LS",
            Variant::MdAbstain => "MD_ABSTAIN",
        }
    }

    pub fn uses_class_subset(self) -> bool {
        matches!(self, Variant::Cd1 | Variant::Cd2 | Variant::Cd3)
    }

    pub fn uses_margin_partition(self) -> bool {
        matches!(self, Variant::MdLs | Variant::MdAbstain)
    }

    /// Student output width for `num_classes` total classes and `|l_in|`.
    pub fn output_width(self, num_classes: usize, in_domain: usize) -> usize {
        match self {
            Variant::Baseline | Variant::Cd1 | Variant::MdLs => num_classes,
            Variant::Cd2 => in_domain,
            Variant::Cd3 => in_domain + 1,
            Variant::MdAbstain => num_classes + 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown distillation variant {s:?}")))
    }
}

/// How the teacher margin used for partitioning is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginSpace {
    /// Top-1 minus top-2 softmax probability (at the run temperature).
    #[default]
    Probability,
    /// Top-1 minus top-2 raw teacher logit.
    Logit,
}

impl FromStr for MarginSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "probability" | "prob" => Ok(MarginSpace::Probability),
            "logit" => Ok(MarginSpace::Logit),
            other => Err(Error::config(format!("unknown margin space {other:?}"))),
        }
    }
}

impl fmt::Display for MarginSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarginSpace::Probability => "probability",
            MarginSpace::Logit => "logit",
        })
    }
}

/// Variant plus every distillation hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub variant: Variant,
    /// Weight of the true-label term.
    pub a: f64,
    /// Weight of the pseudo-label term.
    pub b: f64,
    pub tau: f64,
    /// Label smoothing, used by CD1 and MD_LS.
    pub alpha: f64,
    /// Teacher-margin threshold, used by MD_LS and MD_ABSTAIN.
    pub rho_tr: f64,
    pub l_in: Vec<usize>,
    pub margin_space: MarginSpace,
}

impl DistillConfig {
    /// `a = 0, b = 1, tau = 1`; other knobs neutral.
    pub fn new(variant: Variant) -> Self {
        DistillConfig {
            variant,
            a: 0.0,
            b: 1.0,
            tau: 1.0,
            alpha: 0.0,
            rho_tr: 0.5,
            l_in: Vec::new(),
            margin_space: MarginSpace::Probability,
        }
    }

    pub fn with_l_in(mut self, l_in: impl IntoIterator<Item = usize>) -> Self {
        let mut l_in: Vec<usize> = l_in.into_iter().collect();
        l_in.sort_unstable();
        l_in.dedup();
        self.l_in = l_in;
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.a) || !nonneg(self.b) || self.a + self.b <= 0.0 {
            return Err(Error::config("need a >= 0, b >= 0 and a + b > 0"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        match self.margin_space {
            MarginSpace::Probability if !(0.0..=1.0).contains(&self.rho_tr) => {
                return Err(Error::config("rho_tr must lie in [0, 1]"));
            }
            MarginSpace::Logit if !nonneg(self.rho_tr) => {
                return Err(Error::config("logit-space rho_tr must be >= 0"));
            }
            _ => {}
        }
        if self.variant.uses_class_subset() && self.l_in.is_empty() {
            return Err(Error::config(format!(
                "{} needs a nonempty l_in",
                self.variant
            )));
        }
        if self.l_in.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("l_in must be sorted and unique"));
        }
        if let Some(&c) = self.l_in.iter().find(|&&c| c >= num_classes) {
            return Err(Error::config(format!(
                "l_in class {c} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    /// Conditions worth surfacing to the user that are not errors.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if matches!(self.variant, Variant::Cd2) && self.l_in.len() == 1 {
            out.push(
                "CD2 with a single in-domain class: the student is constant and its margin is \
                 undefined; use class or abstain delegation"
                    .to_string(),
            );
        }
        out
    }

    pub fn output_width(&self, num_classes: usize) -> usize {
        self.variant.output_width(num_classes, self.l_in.len())
    }

    fn in_domain_slot(&self, y: usize) -> Option<usize> {
        self.l_in.binary_search(&y).ok()
    }

    /// Whether `(x, y)` belongs to the easy set for this variant.
    pub fn is_easy(&self, y: usize, teacher_logits: &[f64]) -> Result<bool> {
        match self.variant {
            Variant::Baseline => Ok(true),
            Variant::Cd1 | Variant::Cd2 | Variant::Cd3 => Ok(self.in_domain_slot(y).is_some()),
            Variant::MdLs | Variant::MdAbstain => {
                Ok(margin_in(teacher_logits, self.tau, self.margin_space)? > self.rho_tr)
            }
        }
    }

    fn metadata(&self) -> Vec<(&'static str, String)> {
        let l_in: Vec<String> = self.l_in.iter().map(usize::to_string).collect();
        vec![
            ("variant", self.variant.to_string()),
            ("a", self.a.to_string()),
            ("b", self.b.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("rho_tr", self.rho_tr.to_string()),
            (
                "l_in",
                if l_in.is_empty() {
                    "-".to_string()
                } else {
                    l_in.join(",")
                },
            ),
            ("margin_space", self.margin_space.to_string()),
        ]
    }
}

/// Frozen teacher logits, one row per training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScoreCache {
    num_classes: usize,
    tau: f64,
    teacher: String,
    logits: Vec<f64>,
}

impl TeacherScoreCache {
    pub fn new(rows: &[Vec<f64>], num_classes: usize, tau: f64, teacher: &str) -> Result<Self> {
        let mut logits = Vec::with_capacity(rows.len() * num_classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::invalid(format!(
                    "score row {i} has {} entries, expected {num_classes}",
                    row.len()
                )));
            }
            logits.extend_from_slice(row);
        }
        TeacherScoreCache::from_flat(logits, num_classes, tau, teacher)
    }

    fn from_flat(logits: Vec<f64>, num_classes: usize, tau: f64, teacher: &str) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("score cache needs at least one class"));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::invalid("cache temperature must be positive"));
        }
        if teacher.is_empty() || teacher.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("unusable teacher tag {teacher:?}")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("teacher logits must be finite"));
        }
        Ok(TeacherScoreCache {
            num_classes,
            tau,
            teacher: teacher.to_string(),
            logits,
        })
    }

    /// Runs the teacher once over `data`.
    pub fn from_network(net: &Network, data: &Dataset, tau: f64, teacher: &str) -> Result<Self> {
        if net.input_width() != data.dim() {
            return Err(Error::config(format!(
                "teacher expects {} features, dataset has {}",
                net.input_width(),
                data.dim()
            )));
        }
        if net.output_width() != data.num_classes() {
            return Err(Error::config(format!(
                "teacher outputs {} classes, dataset has {}",
                net.output_width(),
                data.num_classes()
            )));
        }
        let rows = par::map_indexed(data.len(), Exec::default(), |i| {
            net.forward_raw(data.features(i))
        });
        TeacherScoreCache::from_flat(rows.concat(), data.num_classes(), tau, teacher)
    }

    pub fn len(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn teacher(&self) -> &str {
        &self.teacher
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = format!(
            "scorev1 n={} L={} tau={} teacher={}\n",
            self.len(),
            self.num_classes,
            self.tau,
            self.teacher
        )
        .into_bytes();
        for v in &self.logits {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        TeacherScoreCache::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |location: String, msg: String| Error::Parse {
            path: origin.to_string(),
            location,
            msg,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("line 1".into(), "missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| err("line 1".into(), "header is not UTF-8".into()))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some("scorev1") {
            return Err(err("line 1".into(), "expected `scorev1` header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let token = tokens
                .next()
                .ok_or_else(|| err("line 1".into(), format!("missing field {name}")))?;
            token
                .strip_prefix(name)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| err("line 1".into(), format!("expected {name}=, got {token:?}")))
        };
        let n: usize = field("n")?
            .parse()
            .map_err(|_| err("line 1".into(), "bad n".into()))?;
        let num_classes: usize = field("L")?
            .parse()
            .map_err(|_| err("line 1".into(), "bad L".into()))?;
        let tau: f64 = field("tau")?
            .parse()
            .map_err(|_| err("line 1".into(), "bad tau".into()))?;
        let teacher = field("teacher")?;
        let blob = &bytes[newline + 1..];
        if blob.len() != n * num_classes * 8 {
            return Err(err(
                format!("byte offset {}", newline + 1),
                format!(
                    "expected {} score bytes, found {}",
                    n * num_classes * 8,
                    blob.len()
                ),
            ));
        }
        let logits = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        TeacherScoreCache::from_flat(logits, num_classes, tau, &teacher)
            .map_err(|e| err("body".into(), e.to_string()))
    }
}

/// Easy/hard split of a training set, as sorted index lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Partition {
    fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let mut partition = Partition::default();
        for (i, easy) in flags.into_iter().enumerate() {
            if easy {
                partition.easy.push(i);
            } else {
                partition.hard.push(i);
            }
        }
        partition
    }
}

/// Easy iff the label is in `l_in`.
pub fn partition_by_class(
    labels: &[usize],
    l_in: &[usize],
    num_classes: usize,
) -> Result<Partition> {
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {num_classes} classes"
        )));
    }
    if let Some(&c) = l_in.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("l_in class {c} out of range")));
    }
    Ok(Partition::from_flags(
        labels.iter().map(|y| l_in.contains(y)),
    ))
}

/// Top-1 minus top-2 probability of a teacher distribution.
pub fn teacher_margin(teacher_dist: &ProbDist) -> Result<f64> {
    teacher_dist.margin()
}

fn margin_in(logits: &[f64], tau: f64, space: MarginSpace) -> Result<f64> {
    match space {
        MarginSpace::Probability => teacher_margin(&nn::softmax(logits, tau)?),
        MarginSpace::Logit => top_two_gap(logits),
    }
}

/// Easy iff the teacher's softmax margin at `tau` is strictly above `rho_tr`.
pub fn partition_by_margin(cache: &TeacherScoreCache, rho_tr: f64, tau: f64) -> Result<Partition> {
    partition_by_margin_in(cache, rho_tr, tau, MarginSpace::Probability)
}

pub fn partition_by_margin_in(
    cache: &TeacherScoreCache,
    rho_tr: f64,
    tau: f64,
    space: MarginSpace,
) -> Result<Partition> {
    if space == MarginSpace::Probability && !(0.0..=1.0).contains(&rho_tr) {
        return Err(Error::invalid(format!("rho_tr {rho_tr} outside [0, 1]")));
    }
    let margins = par::try_map_indexed(cache.len(), Exec::default(), |i| {
        margin_in(cache.entry(i), tau, space)
    })?;
    Ok(Partition::from_flags(
        margins.into_iter().map(|m| m > rho_tr),
    ))
}

fn check_label(y: usize, num_classes: usize) -> Result<()> {
    if y >= num_classes {
        return Err(Error::invalid(format!(
            "label {y} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn smoothed_one_hot(y: usize, num_classes: usize, alpha: f64) -> ProbDist {
    let floor = alpha / num_classes as f64;
    let mut probs = vec![floor; num_classes];
    probs[y] = (1.0 - alpha) + floor;
    ProbDist::new_unchecked(probs)
}

/// Teacher softmax renormalized over the classes in `l_in` only.
pub fn restricted_softmax(teacher_logits: &[f64], l_in: &[usize], tau: f64) -> Result<ProbDist> {
    let picked: Vec<f64> = l_in
        .iter()
        .map(|&c| {
            teacher_logits
                .get(c)
                .copied()
                .ok_or_else(|| Error::invalid(format!("l_in class {c} out of range")))
        })
        .collect::<Result<_>>()?;
    nn::softmax(&picked, tau)
}

/// Full teacher softmax.
pub fn pseudo_label_baseline(teacher_logits: &[f64], tau: f64) -> Result<ProbDist> {
    nn::softmax(teacher_logits, tau)
}

/// Teacher softmax if `y` is in-domain, else `(1 - alpha) e_y + alpha / L`.
pub fn pseudo_label_cd1(
    y: usize,
    teacher_logits: &[f64],
    alpha: f64,
    l_in: &[usize],
    tau: f64,
) -> Result<ProbDist> {
    check_label(y, teacher_logits.len())?;
    if l_in.contains(&y) {
        pseudo_label_baseline(teacher_logits, tau)
    } else {
        Ok(smoothed_one_hot(y, teacher_logits.len(), alpha))
    }
}

/// Restricted teacher softmax if `y` is in-domain, else uniform over `L'`.
pub fn pseudo_label_cd2(
    y: usize,
    teacher_logits: &[f64],
    l_in: &[usize],
    tau: f64,
) -> Result<ProbDist> {
    check_label(y, teacher_logits.len())?;
    if l_in.contains(&y) {
        restricted_softmax(teacher_logits, l_in, tau)
    } else {
        ProbDist::uniform(l_in.len())
    }
}

/// `(restricted softmax, 0)` if `y` is in-domain, else one-hot on the abstain slot.
pub fn pseudo_label_cd3(
    y: usize,
    teacher_logits: &[f64],
    l_in: &[usize],
    tau: f64,
) -> Result<ProbDist> {
    check_label(y, teacher_logits.len())?;
    if l_in.is_empty() {
        return Err(Error::invalid("l_in is empty"));
    }
    if l_in.contains(&y) {
        let mut probs = restricted_softmax(teacher_logits, l_in, tau)?.into_vec();
        probs.push(0.0);
        Ok(ProbDist::new_unchecked(probs))
    } else {
        ProbDist::one_hot(l_in.len(), l_in.len() + 1)
    }
}

/// Teacher softmax on easy examples, label-smoothed one-hot on hard ones.
pub fn pseudo_label_md_ls(
    y: usize,
    teacher_logits: &[f64],
    easy: bool,
    alpha: f64,
    tau: f64,
) -> Result<ProbDist> {
    check_label(y, teacher_logits.len())?;
    if easy {
        pseudo_label_baseline(teacher_logits, tau)
    } else {
        Ok(smoothed_one_hot(y, teacher_logits.len(), alpha))
    }
}

/// `(teacher softmax, 0)` on easy examples, abstain one-hot on hard ones.
pub fn pseudo_label_md_abstain(
    y: usize,
    teacher_logits: &[f64],
    easy: bool,
    tau: f64,
) -> Result<ProbDist> {
    let num_classes = teacher_logits.len();
    check_label(y, num_classes)?;
    if easy {
        let mut probs = pseudo_label_baseline(teacher_logits, tau)?.into_vec();
        probs.push(0.0);
        Ok(ProbDist::new_unchecked(probs))
    } else {
        ProbDist::one_hot(num_classes, num_classes + 1)
    }
}

/// Pseudo-label for `(x, y)` under `cfg`, with easy/hard membership derived
/// from the config (class subset or teacher margin).
pub fn pseudo_label(cfg: &DistillConfig, y: usize, teacher_logits: &[f64]) -> Result<ProbDist> {
    let tau = cfg.tau;
    match cfg.variant {
        Variant::Baseline => pseudo_label_baseline(teacher_logits, tau),
        Variant::Cd1 => pseudo_label_cd1(y, teacher_logits, cfg.alpha, &cfg.l_in, tau),
        Variant::Cd2 => pseudo_label_cd2(y, teacher_logits, &cfg.l_in, tau),
        Variant::Cd3 => pseudo_label_cd3(y, teacher_logits, &cfg.l_in, tau),
        Variant::MdLs => {
            let easy = cfg.is_easy(y, teacher_logits)?;
            pseudo_label_md_ls(y, teacher_logits, easy, cfg.alpha, tau)
        }
        Variant::MdAbstain => {
            let easy = cfg.is_easy(y, teacher_logits)?;
            pseudo_label_md_abstain(y, teacher_logits, easy, tau)
        }
    }
}

/// One-hot true-label target mapped into the variant's output space.
///
/// Reduced and extended spaces: in-domain labels map to their restricted slot,
/// out-of-domain/hard labels to the abstain slot. CD2 has no abstain slot, so
/// its out-of-domain labels get the uniform distribution.
pub fn true_label_target(
    cfg: &DistillConfig,
    y: usize,
    teacher_logits: &[f64],
) -> Result<ProbDist> {
    let num_classes = teacher_logits.len();
    check_label(y, num_classes)?;
    let l_prime = cfg.l_in.len();
    match cfg.variant {
        Variant::Baseline | Variant::Cd1 | Variant::MdLs => ProbDist::one_hot(y, num_classes),
        Variant::Cd2 => match cfg.in_domain_slot(y) {
            Some(slot) => ProbDist::one_hot(slot, l_prime),
            None => ProbDist::uniform(l_prime),
        },
        Variant::Cd3 => match cfg.in_domain_slot(y) {
            Some(slot) => ProbDist::one_hot(slot, l_prime + 1),
            None => ProbDist::one_hot(l_prime, l_prime + 1),
        },
        Variant::MdAbstain => {
            if cfg.is_easy(y, teacher_logits)? {
                ProbDist::one_hot(y, num_classes + 1)
            } else {
                ProbDist::one_hot(num_classes, num_classes + 1)
            }
        }
    }
}

/// Per-instance objective `a H(p_y, p_f) + b H(p~, p_f)` with `p_f` the student
/// softmax at `cfg.tau`.
pub fn distill_objective(
    y: usize,
    teacher_logits: &[f64],
    student_logits: &[f64],
    cfg: &DistillConfig,
) -> Result<f64> {
    let width = cfg.output_width(teacher_logits.len());
    if student_logits.len() != width {
        return Err(Error::invalid(format!(
            "{} student must output {width} scores, got {}",
            cfg.variant,
            student_logits.len()
        )));
    }
    // -0.0 is the exact additive identity, so a single term passes through unchanged
    let mut value = -0.0;
    if cfg.a != 0.0 {
        let target = true_label_target(cfg, y, teacher_logits)?;
        value += cfg.a * softmax_cross_entropy(&target, student_logits, cfg.tau)?;
    }
    if cfg.b != 0.0 {
        let target = pseudo_label(cfg, y, teacher_logits)?;
        value += cfg.b * softmax_cross_entropy(&target, student_logits, cfg.tau)?;
    }
    Ok(value)
}

/// Single soft target whose cross-entropy, scaled by `a + b`, equals the
/// objective: `(a p_y + b p~) / (a + b)`.
pub fn combined_target(cfg: &DistillConfig, y: usize, teacher_logits: &[f64]) -> Result<ProbDist> {
    if cfg.a == 0.0 {
        return pseudo_label(cfg, y, teacher_logits);
    }
    if cfg.b == 0.0 {
        return true_label_target(cfg, y, teacher_logits);
    }
    let truth = true_label_target(cfg, y, teacher_logits)?;
    let pseudo = pseudo_label(cfg, y, teacher_logits)?;
    let total = cfg.a + cfg.b;
    let mixed = truth
        .as_slice()
        .iter()
        .zip(pseudo.as_slice())
        .map(|(t, p)| (cfg.a * t + cfg.b * p) / total)
        .collect();
    ProbDist::new(mixed)
}

fn check_cache(labels: &[usize], cache: &TeacherScoreCache) -> Result<()> {
    if labels.len() != cache.len() {
        return Err(Error::config(format!(
            "score cache has {} rows but the dataset has {} examples",
            cache.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Pseudo-labels for every training example, index-aligned with `labels`.
pub fn pseudo_labels(
    labels: &[usize],
    cache: &TeacherScoreCache,
    cfg: &DistillConfig,
    exec: Exec,
) -> Result<Vec<ProbDist>> {
    check_cache(labels, cache)?;
    cfg.validate(cache.num_classes())?;
    par::try_map_indexed(labels.len(), exec, |i| {
        pseudo_label(cfg, labels[i], cache.entry(i))
    })
}

/// Combined training targets for every example.
pub fn training_targets(
    labels: &[usize],
    cache: &TeacherScoreCache,
    cfg: &DistillConfig,
    exec: Exec,
) -> Result<Vec<ProbDist>> {
    check_cache(labels, cache)?;
    cfg.validate(cache.num_classes())?;
    par::try_map_indexed(labels.len(), exec, |i| {
        combined_target(cfg, labels[i], cache.entry(i))
    })
}

fn check_student(
    student: &Network,
    data: &Dataset,
    cache: &TeacherScoreCache,
    cfg: &DistillConfig,
) -> Result<()> {
    cfg.validate(data.num_classes())?;
    check_cache(data.labels(), cache)?;
    if cache.num_classes() != data.num_classes() {
        return Err(Error::config(format!(
            "score cache has {} classes, dataset has {}",
            cache.num_classes(),
            data.num_classes()
        )));
    }
    let width = cfg.output_width(data.num_classes());
    if student.output_width() != width {
        return Err(Error::config(format!(
            "{} student must have output width {width}, got {}",
            cfg.variant,
            student.output_width()
        )));
    }
    if student.input_width() != data.dim() {
        return Err(Error::config(format!(
            "student expects {} features, dataset has {}",
            student.input_width(),
            data.dim()
        )));
    }
    Ok(())
}

/// Mean per-instance objective of `student` over the training set.
pub fn mean_objective(
    student: &Network,
    data: &Dataset,
    cache: &TeacherScoreCache,
    cfg: &DistillConfig,
) -> Result<f64> {
    check_student(student, data, cache, cfg)?;
    let values = par::try_map_indexed(data.len(), Exec::default(), |i| {
        let logits = student.forward_raw(data.features(i));
        distill_objective(data.labels()[i], cache.entry(i), &logits, cfg)
    })?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Trains `student` on the variant's targets. The returned network carries the
/// distillation settings as checkpoint metadata.
pub fn distill_train(
    student: &Network,
    data: &Dataset,
    cache: &TeacherScoreCache,
    cfg: &DistillConfig,
    spec: &TrainSpec,
) -> Result<Network> {
    check_student(student, data, cache, cfg)?;
    let targets = training_targets(data.labels(), cache, cfg, Exec::default())?;
    let examples: Vec<Example<'_>> = targets
        .iter()
        .enumerate()
        .map(|(i, target)| Example {
            features: data.features(i),
            target,
        })
        .collect();
    // (a + b) H(combined, p) has the same gradient as the weighted objective.
    let scaled = TrainSpec {
        learning_rate: spec.learning_rate * (cfg.a + cfg.b),
        ..*spec
    };
    let mut trained = nn::train(student, &examples, &scaled, cfg.tau)?;
    for (key, value) in cfg.metadata() {
        trained.set_metadata(key, &value)?;
    }
    trained.set_metadata("teacher", cache.teacher())?;
    Ok(trained)
}
