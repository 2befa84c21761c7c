//! Metrics, cost accounting, threshold sweeps and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cascade::{
    check_cascade, route, Decider, Decision, DelegationPolicy, LabelSpace, StudentOutput,
    TeacherOracle,
};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::par::{self, Exec};

/// Abstract per-instance inference cost of each model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub student_cost: f64,
    pub teacher_cost: f64,
    pub unit: String,
}

impl CostModel {
    pub fn new(student_cost: f64, teacher_cost: f64, unit: &str) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(student_cost) || !ok(teacher_cost) {
            return Err(Error::config("model costs must be finite and >= 0"));
        }
        if unit.is_empty() || unit.contains([',', '\n']) {
            return Err(Error::config(format!("unusable cost unit {unit:?}")));
        }
        Ok(CostModel {
            student_cost,
            teacher_cost,
            unit: unit.to_string(),
        })
    }

    /// ResNet-32 student (72M FLOPs) against an EfficientNet-L2 teacher (478G FLOPs).
    pub fn resnet32_efficientnet_l2() -> Self {
        CostModel {
            student_cost: 72e6,
            teacher_cost: 478e9,
            unit: "FLOPs".to_string(),
        }
    }

    /// Multiply-accumulate counts of the two networks.
    pub fn from_macs(student: &Network, teacher: &TeacherOracle) -> Self {
        CostModel {
            student_cost: student.macs() as f64,
            teacher_cost: teacher.macs() as f64,
            unit: "MACs".to_string(),
        }
    }

    /// Every instance pays for the student; delegated ones also pay for the teacher.
    pub fn expected_cost(&self, fraction_delegated: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&fraction_delegated) {
            return Err(Error::invalid(format!(
                "delegated fraction {fraction_delegated} outside [0, 1]"
            )));
        }
        Ok(self.student_cost + fraction_delegated * self.teacher_cost)
    }
}

/// Fraction of decisions whose final label matches.
pub fn accuracy(decisions: &[Decision], labels: &[usize]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::invalid("no decisions to score"));
    }
    if decisions.len() != labels.len() {
        return Err(Error::invalid("decisions and labels differ in length"));
    }
    let correct = decisions
        .iter()
        .zip(labels)
        .filter(|(d, &y)| d.final_label == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// How in-domain test instances were selected.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskDefinition {
    ByClass(Vec<usize>),
    ByTeacherMargin(f64),
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InDomainMask {
    pub flags: Vec<bool>,
    pub definition: MaskDefinition,
}

impl InDomainMask {
    pub fn all(n: usize) -> Self {
        InDomainMask {
            flags: vec![true; n],
            definition: MaskDefinition::All,
        }
    }

    pub fn by_class(labels: &[usize], l_in: &[usize]) -> Self {
        InDomainMask {
            flags: labels.iter().map(|y| l_in.contains(y)).collect(),
            definition: MaskDefinition::ByClass(l_in.to_vec()),
        }
    }

    /// In-domain iff the teacher's margin (softmax at temperature 1) is at least `threshold`.
    pub fn by_teacher_margin(
        teacher: &TeacherOracle,
        data: &Dataset,
        threshold: f64,
    ) -> Result<Self> {
        let margins = par::try_map_indexed(data.len(), Exec::default(), |i| {
            teacher
                .distribution(data.features(i), Some(data.labels()[i]))?
                .margin()
        })?;
        Ok(InDomainMask {
            flags: margins.into_iter().map(|m| m >= threshold).collect(),
            definition: MaskDefinition::ByTeacherMargin(threshold),
        })
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InDomainStats {
    pub accuracy: f64,
    pub fraction_student: f64,
    pub count: usize,
}

/// Accuracy and student fraction restricted to masked instances; `None` when
/// the mask selects nothing.
pub fn in_domain_accuracy(
    decisions: &[Decision],
    labels: &[usize],
    mask: &InDomainMask,
) -> Result<Option<InDomainStats>> {
    if decisions.len() != labels.len() || mask.flags.len() != labels.len() {
        return Err(Error::invalid(
            "decisions, labels and mask differ in length",
        ));
    }
    let (mut count, mut correct, mut student) = (0usize, 0usize, 0usize);
    for ((d, &y), &keep) in decisions.iter().zip(labels).zip(&mask.flags) {
        if !keep {
            continue;
        }
        count += 1;
        correct += usize::from(d.final_label == y);
        student += usize::from(d.decider == Decider::Student);
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(InDomainStats {
        accuracy: correct as f64 / count as f64,
        fraction_student: student as f64 / count as f64,
        count,
    }))
}

fn fraction_student(decisions: &[Decision]) -> f64 {
    let student = decisions
        .iter()
        .filter(|d| d.decider == Decider::Student)
        .count();
    student as f64 / decisions.len() as f64
}

/// One sample of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub rho: f64,
    pub fraction_student: f64,
    pub overall_acc: f64,
    /// NaN when the in-domain mask is empty.
    pub in_domain_acc: f64,
    /// Student fraction among in-domain instances; NaN when the mask is empty.
    pub in_domain_fraction: f64,
    pub expected_cost: f64,
}

/// Threshold-parameterized policy family swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFamily {
    Margin,
    AbstainMargin,
}

impl SweepFamily {
    pub fn policy(self, rho: f64) -> DelegationPolicy {
        match self {
            SweepFamily::Margin => DelegationPolicy::MarginBased { rho },
            SweepFamily::AbstainMargin => DelegationPolicy::AbstainMargin { rho },
        }
    }
}

/// Student outputs for every row of `data`, in order.
pub fn student_outputs(
    student: &Network,
    space: &LabelSpace,
    data: &Dataset,
    exec: Exec,
) -> Result<Vec<StudentOutput>> {
    if student.input_width() != data.dim() {
        return Err(Error::config(format!(
            "student expects {} features, test set has {}",
            student.input_width(),
            data.dim()
        )));
    }
    par::try_map_indexed(data.len(), exec, |i| {
        StudentOutput::from_logits(space, &student.forward_raw(data.features(i)))
    })
}

/// Two-stage decisions for a cached set of student outputs. The teacher is
/// only called on instances flagged in `needs_teacher`.
fn teacher_labels(
    teacher: &TeacherOracle,
    data: &Dataset,
    needs_teacher: &[bool],
) -> Result<Vec<Option<usize>>> {
    par::try_map_indexed(data.len(), Exec::default(), |i| {
        if needs_teacher[i] {
            teacher
                .predict(data.features(i), Some(data.labels()[i]))
                .map(Some)
        } else {
            Ok(None)
        }
    })
}

fn decide_all(
    policy: &DelegationPolicy,
    outputs: &[StudentOutput],
    teacher_preds: &[Option<usize>],
) -> Vec<Decision> {
    outputs
        .iter()
        .zip(teacher_preds)
        .map(|(out, teacher_pred)| {
            let decider = route(policy, out);
            let final_label = match decider {
                Decider::Student => out.class.expect("student decides only on real classes"),
                Decider::Teacher => {
                    teacher_pred.expect("teacher label computed for delegated rows")
                }
            };
            Decision {
                final_label,
                decider,
                student_margin: out.margin,
                abstained: out.abstained(),
            }
        })
        .collect()
}

/// Two-stage decisions for every test instance under a single policy.
pub fn evaluate(
    student: &Network,
    space: &LabelSpace,
    teacher: &TeacherOracle,
    policy: &DelegationPolicy,
    data: &Dataset,
) -> Result<Vec<Decision>> {
    check_cascade(student, space, teacher, policy)?;
    let outputs = student_outputs(student, space, data, Exec::default())?;
    let delegated: Vec<bool> = outputs
        .iter()
        .map(|o| route(policy, o) == Decider::Teacher)
        .collect();
    let preds = teacher_labels(teacher, data, &delegated)?;
    Ok(decide_all(policy, &outputs, &preds))
}

/// Summarizes one set of decisions as a trade-off point.
pub fn summarize(
    rho: f64,
    decisions: &[Decision],
    labels: &[usize],
    mask: &InDomainMask,
    cost: &CostModel,
) -> Result<TradeoffPoint> {
    let overall_acc = accuracy(decisions, labels)?;
    let fraction_student = fraction_student(decisions);
    let in_domain = in_domain_accuracy(decisions, labels, mask)?;
    Ok(TradeoffPoint {
        rho,
        fraction_student,
        overall_acc,
        in_domain_acc: in_domain.map_or(f64::NAN, |s| s.accuracy),
        in_domain_fraction: in_domain.map_or(f64::NAN, |s| s.fraction_student),
        expected_cost: cost.expected_cost(1.0 - fraction_student)?,
    })
}

/// Evaluates a policy family at every `rho` in the (ascending) grid.
///
/// Student outputs are computed once; each threshold only re-routes the cached
/// margins. The teacher runs once per instance that any threshold delegates.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    student: &Network,
    space: &LabelSpace,
    teacher: &TeacherOracle,
    data: &Dataset,
    mask: &InDomainMask,
    family: SweepFamily,
    rho_grid: &[f64],
    cost: &CostModel,
) -> Result<Vec<TradeoffPoint>> {
    if rho_grid.is_empty() {
        return Err(Error::invalid("empty rho grid"));
    }
    if rho_grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt()))
    {
        return Err(Error::invalid("rho grid must be sorted ascending"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if mask.flags.len() != data.len() {
        return Err(Error::invalid("mask length differs from test set"));
    }
    let policies: Vec<DelegationPolicy> = rho_grid.iter().map(|&r| family.policy(r)).collect();
    for policy in &policies {
        check_cascade(student, space, teacher, policy)?;
    }
    let outputs = student_outputs(student, space, data, Exec::default())?;
    let needs_teacher: Vec<bool> = outputs
        .iter()
        .map(|o| policies.iter().any(|p| route(p, o) == Decider::Teacher))
        .collect();
    let preds = teacher_labels(teacher, data, &needs_teacher)?;
    policies
        .iter()
        .zip(rho_grid)
        .map(|(policy, &rho)| {
            let decisions = decide_all(policy, &outputs, &preds);
            summarize(rho, &decisions, data.labels(), mask, cost)
        })
        .collect()
}

/// Wall-clock seconds per instance for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub median: f64,
    pub p90: f64,
}

pub fn measure_latency(net: &Network, data: &Dataset, repetitions: usize) -> Result<Latency> {
    if repetitions < 3 {
        return Err(Error::invalid("latency needs at least 3 repetitions"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if net.input_width() != data.dim() {
        return Err(Error::invalid("network and data widths differ"));
    }
    let mut samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            for x in data.rows() {
                std::hint::black_box(net.forward_raw(std::hint::black_box(x)));
            }
            start.elapsed().as_secs_f64() / data.len() as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let rank =
        |q: f64| samples[((q * repetitions as f64).ceil() as usize).clamp(1, repetitions) - 1];
    Ok(Latency {
        median: rank(0.5),
        p90: rank(0.9),
    })
}

pub const TRADEOFF_HEADER: &str =
    "rho,fraction_student,overall_acc,in_domain_acc,expected_cost,unit";

fn fixed6(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// CSV text for a sweep.
pub fn tradeoff_csv(points: &[TradeoffPoint], unit: &str) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{unit}",
            fixed6(p.rho),
            fixed6(p.fraction_student),
            fixed6(p.overall_acc),
            fixed6(p.in_domain_acc),
            fixed6(p.expected_cost),
        );
    }
    out
}

const SVG_PANEL_W: f64 = 420.0;
const SVG_PANEL_H: f64 = 320.0;
const SVG_PAD: f64 = 50.0;

struct Panel<'a> {
    title: &'a str,
    x_label: String,
    x_max: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    color: &'a str,
}

fn draw_panel(out: &mut String, offset_x: f64, panel: &Panel<'_>) {
    let (w, h) = (SVG_PANEL_W - 2.0 * SVG_PAD, SVG_PANEL_H - 2.0 * SVG_PAD);
    let x0 = offset_x + SVG_PAD;
    let y0 = SVG_PAD;
    let x_max = if panel.x_max > 0.0 { panel.x_max } else { 1.0 };
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        x0 + w / 2.0,
        y0 - 15.0,
        panel.title
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        x0 + w / 2.0,
        y0 + h + 35.0,
        panel.x_label
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">accuracy</text>"#,
        x0 - 35.0,
        y0 + h / 2.0,
        x0 - 35.0,
        y0 + h / 2.0
    );
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{:.2}</text>"#,
            x0 - 5.0,
            y0 + h - frac * h + 3.0,
            frac
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            x0 + frac * w,
            y0 + h + 15.0,
            compact(frac * x_max)
        );
    }
    let vertices: Vec<String> = panel
        .xs
        .iter()
        .zip(&panel.ys)
        .map(|(&x, &y)| {
            let px = x0 + (x / x_max).clamp(0.0, 1.0) * w;
            let py = y0 + h - y.clamp(0.0, 1.0) * h;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
        panel.color,
        vertices.join(" ")
    );
}

fn compact(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".to_string()
    } else if a >= 1e9 {
        format!("{:.1}G", v / 1e9)
    } else if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{v:.2}")
    }
}

/// Self-contained SVG with accuracy against student fraction and against
/// expected cost, one polyline each.
pub fn tradeoff_svg(points: &[TradeoffPoint], unit: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        2.0 * SVG_PANEL_W,
        SVG_PANEL_H,
        2.0 * SVG_PANEL_W,
        SVG_PANEL_H
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let accs: Vec<f64> = points.iter().map(|p| p.overall_acc).collect();
    draw_panel(
        &mut out,
        0.0,
        &Panel {
            title: "accuracy vs. fraction decided by student",
            x_label: "fraction decided by student".to_string(),
            x_max: 1.0,
            xs: points.iter().map(|p| p.fraction_student).collect(),
            ys: accs.clone(),
            color: "#1f77b4",
        },
    );
    let cost_max = points.iter().fold(0.0f64, |m, p| m.max(p.expected_cost));
    draw_panel(
        &mut out,
        SVG_PANEL_W,
        &Panel {
            title: "accuracy vs. expected cost",
            x_label: format!("expected cost ({unit})"),
            x_max: cost_max,
            xs: points.iter().map(|p| p.expected_cost).collect(),
            ys: accs,
            color: "#d62728",
        },
    );
    out.push_str("</svg>\n");
    out
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Writes `<path>` as CSV and the same stem with an `.svg` extension.
pub fn emit_report(points: &[TradeoffPoint], unit: &str, path: &Path) -> Result<ReportFiles> {
    if points.is_empty() {
        return Err(Error::invalid("no trade-off points to report"));
    }
    let svg = path.with_extension("svg");
    std::fs::write(path, tradeoff_csv(points, unit)).map_err(|e| Error::io(path, e))?;
    std::fs::write(&svg, tradeoff_svg(points, unit)).map_err(|e| Error::io(&svg, e))?;
    Ok(ReportFiles {
        csv: path.to_path_buf(),
        svg,
    })
}

/// One row of the variant comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub approach: String,
    pub in_domain_acc: f64,
    pub in_domain_fraction: f64,
    pub overall_acc: f64,
    pub overall_fraction: f64,
}

pub const COMPARISON_HEADER: &str =
    "approach,in_domain_accuracy,in_domain_fraction,overall_accuracy,overall_fraction";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.approach,
            fixed6(r.in_domain_acc),
            fixed6(r.in_domain_fraction),
            fixed6(r.overall_acc),
            fixed6(r.overall_fraction)
        );
    }
    out
}

/// Plain-text table grouped as In-domain (accuracy, fraction) and Overall
/// (accuracy, fraction).
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.approach.len())
        .max()
        .unwrap_or(0)
        .max("Approach".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:name_w$}  {:^19}  {:^19}",
        "", "In-domain", "Overall"
    );
    let _ = writeln!(
        out,
        "{:name_w$}  {:>9} {:>9}  {:>9} {:>9}",
        "Approach", "Accuracy", "Fraction", "Accuracy", "Fraction"
    );
    for r in rows {
        let cell = |v: f64| {
            if v.is_nan() {
                "-".to_string()
            } else {
                format!("{v:.2}")
            }
        };
        let _ = writeln!(
            out,
            "{:name_w$}  {:>9} {:>9}  {:>9} {:>9}",
            r.approach,
            cell(r.in_domain_acc),
            cell(r.in_domain_fraction),
            cell(r.overall_acc),
            cell(r.overall_fraction)
        );
    }
    out
}
