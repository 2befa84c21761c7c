//! Config-driven experiment runner.
//!
//! A run directory holds every artifact of one experiment:
//!
//! ```text
//! <out>/config.resolved          frozen copy of the resolved config
//! <out>/data/train.data          datav1
//! <out>/data/test_balanced.data
//! <out>/data/test_imbalanced.data
//! <out>/teacher.net              netv1 (trained teacher only)
//! <out>/teacher.scores           scorev1, teacher logits on the training set
//! <out>/students/<name>.net      netv1 with distillation metadata
//! <out>/sweep/<name>.csv|.svg    trade-off curve
//! <out>/report.csv|.txt          variant comparison table
//! ```
//!
//! Every command is a pure function of the resolved config, so reruns produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::{DelegationPolicy, LabelSpace, TeacherOracle};
use crate::datagen::{Dataset, Mixture, MixtureSpec};
use crate::distill::{self, DistillConfig, MarginSpace, TeacherScoreCache, Variant};
use crate::error::{Error, Result};
use crate::eval::{self, ComparisonRow, CostModel, InDomainMask, SweepFamily};
use crate::nn::{self, Example, Network, ProbDist, TrainSpec};
use crate::par::Exec;

/// Counter-based seed splitter (SplitMix64 over `global + stage`).
pub fn stage_seed(global: u64, stage: Stage) -> u64 {
    let mut z = global.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 1,
    TeacherInit = 2,
    TeacherShuffle = 3,
    StudentInit = 4,
    StudentShuffle = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Trained,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSet {
    Balanced,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InDomainBy {
    Class,
    TeacherMargin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub train: TrainSpec,
}

/// One entry of `report.variants`: a variant with optional overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub alpha: Option<f64>,
    pub rho_tr: Option<f64>,
}

impl VariantSpec {
    pub fn label(&self) -> String {
        let mut label = self.variant.to_string();
        let mut extras = Vec::new();
        if let Some(a) = self.alpha {
            extras.push(format!("alpha={a}"));
        }
        if let Some(r) = self.rho_tr {
            extras.push(format!("rho_tr={r}"));
        }
        if !extras.is_empty() {
            let _ = write!(label, "({})", extras.join(","));
        }
        label
    }

    fn file_name(&self) -> String {
        let mut name = self.variant.name().to_ascii_lowercase();
        if let Some(a) = self.alpha {
            let _ = write!(name, "_alpha{a}");
        }
        if let Some(r) = self.rho_tr {
            let _ = write!(name, "_rho{r}");
        }
        name
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    /// `CD1`, `CD1:alpha=0.6`, `MD_LS:alpha=0.2:rho_tr=0.3`
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let variant: Variant = parts.next().unwrap_or_default().parse()?;
        let mut spec = VariantSpec {
            variant,
            alpha: None,
            rho_tr: None,
        };
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad variant override {part:?}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| Error::config(format!("bad number in {part:?}")))?;
            match key {
                "alpha" => spec.alpha = Some(value),
                "rho_tr" => spec.rho_tr = Some(value),
                _ => return Err(Error::config(format!("unknown variant override {key:?}"))),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.variant.name())?;
        if let Some(a) = self.alpha {
            write!(f, ":alpha={a}")?;
        }
        if let Some(r) = self.rho_tr {
            write!(f, ":rho_tr={r}")?;
        }
        Ok(())
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: MixtureSpec,
    pub test_set: TestSet,
    pub teacher_kind: TeacherKind,
    pub teacher_eta: f64,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub distill: DistillConfig,
    pub student_name: Option<String>,
    pub sweep_family: Option<SweepFamily>,
    pub rho_grid: Vec<f64>,
    pub in_domain: InDomainBy,
    pub in_domain_threshold: f64,
    pub cost: CostSetting,
    pub latency_reps: usize,
    pub report_variants: Vec<VariantSpec>,
    pub report_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostSetting {
    /// Multiply-accumulate counts of the actual networks.
    Macs,
    Fixed(CostModel),
}

struct RawConfig {
    origin: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                location: format!("line {line_no}"),
                msg: format!("expected key=value, got {content:?}"),
            })?;
            let key = key.trim().to_string();
            if let Some((_, first)) = entries.get(&key) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    location: format!("line {line_no}"),
                    msg: format!("duplicate key {key} (first set on line {first})"),
                });
            }
            entries.insert(key, (value.trim().to_string(), line_no));
        }
        Ok(RawConfig {
            origin: origin.to_string(),
            entries,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => value.parse::<T>().map(Some).map_err(|_| Error::Parse {
                path: self.origin.clone(),
                location: format!("line {line}"),
                msg: format!("bad value {value:?} for {key}"),
            }),
        }
    }

    fn take_with<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => parse(&value).map(Some).map_err(|e| Error::Parse {
                path: self.origin.clone(),
                location: format!("line {line}"),
                msg: format!("{key}: {e}"),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.iter().min_by_key(|(_, (_, l))| *l) {
            return Err(Error::Parse {
                path: self.origin,
                location: format!("line {line}"),
                msg: format!("unknown key {key}"),
            });
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() || s.trim() == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad list item {t:?}")))
        })
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("expected true/false, got {s:?}"))),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "-".to_string();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::parse(text, origin)?;
        let seed: u64 = raw.take("seed")?.unwrap_or(0);
        let out_dir: PathBuf = raw
            .take::<String>("out_dir")?
            .unwrap_or_else(|| "run".into())
            .into();

        let data = MixtureSpec {
            num_classes: raw.take("data.classes")?.unwrap_or(10),
            dim: raw.take("data.dim")?.unwrap_or(16),
            zipf_exponent: raw.take("data.zipf")?.unwrap_or(1.0),
            radius: raw.take("data.radius")?.unwrap_or(4.0),
            sigma: raw.take("data.sigma")?.unwrap_or(1.0),
            n_train: raw.take("data.n_train")?.unwrap_or(5000),
            n_test: raw.take("data.n_test")?.unwrap_or(5000),
            balanced_test: raw
                .take_with("data.balanced_test", parse_bool)?
                .unwrap_or(true),
            seed: 0,
        };
        let test_set = match raw.take::<String>("eval.test_set")?.as_deref() {
            None | Some("balanced") => TestSet::Balanced,
            Some("imbalanced") => TestSet::Imbalanced,
            Some(other) => return Err(Error::config(format!("unknown eval.test_set {other:?}"))),
        };

        let teacher_kind = match raw.take::<String>("teacher.kind")?.as_deref() {
            None | Some("trained") => TeacherKind::Trained,
            Some("oracle") => TeacherKind::Oracle,
            Some(other) => return Err(Error::config(format!("unknown teacher.kind {other:?}"))),
        };
        let teacher_eta = raw.take("teacher.eta")?.unwrap_or(1.0);

        let mut model =
            |prefix: &str, hidden: Vec<usize>, epochs: usize, lr: f64| -> Result<ModelConfig> {
                let widths: Option<Vec<usize>> =
                    raw.take_with(&format!("{prefix}.widths"), parse_list)?;
                let hidden_key: Option<Vec<usize>> =
                    raw.take_with(&format!("{prefix}.hidden"), parse_list)?;
                let hidden = match (widths, hidden_key) {
                    (Some(_), Some(_)) => {
                        return Err(Error::config(format!(
                            "set only one of {prefix}.widths and {prefix}.hidden"
                        )))
                    }
                    (Some(w), None) => {
                        if w.len() < 2 {
                            return Err(Error::config(format!(
                                "{prefix}.widths needs input and output"
                            )));
                        }
                        w[1..w.len() - 1].to_vec()
                    }
                    (None, Some(h)) => h,
                    (None, None) => hidden,
                };
                Ok(ModelConfig {
                    hidden,
                    train: TrainSpec {
                        learning_rate: raw.take(&format!("{prefix}.lr"))?.unwrap_or(lr),
                        epochs: raw.take(&format!("{prefix}.epochs"))?.unwrap_or(epochs),
                        batch_size: raw.take(&format!("{prefix}.batch_size"))?.unwrap_or(32),
                        shuffle_seed: 0,
                    },
                })
            };
        let teacher = model("teacher", vec![128, 128], 30, 0.05)?;
        let student = model("student", vec![8], 30, 0.05)?;

        let variant: Variant = raw.take("distill.variant")?.unwrap_or(Variant::Baseline);
        let l_in_text: Option<String> = raw.take("distill.l_in")?;
        let mut distill = DistillConfig::new(variant);
        distill.a = raw.take("distill.a")?.unwrap_or(0.0);
        distill.b = raw.take("distill.b")?.unwrap_or(1.0);
        distill.tau = raw.take("distill.tau")?.unwrap_or(1.0);
        distill.alpha = raw.take("distill.alpha")?.unwrap_or(0.0);
        distill.rho_tr = raw.take("distill.rho_tr")?.unwrap_or(0.5);
        distill.margin_space = raw
            .take::<MarginSpace>("distill.margin_space")?
            .unwrap_or_default();
        let l_in = match l_in_text.as_deref() {
            None => Vec::new(),
            Some(text) => match text.strip_prefix("top:") {
                // priors decrease with the class index, so the head is 0..k
                Some(k) => {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::config(format!("bad distill.l_in {text:?}")))?;
                    (0..k.min(data.num_classes)).collect()
                }
                None => parse_list(text)?,
            },
        };
        distill = distill.with_l_in(l_in);
        let student_name: Option<String> = raw.take("distill.name")?;

        let sweep_family = match raw.take::<String>("sweep.family")?.as_deref() {
            None | Some("auto") => None,
            Some("margin") => Some(SweepFamily::Margin),
            Some("abstain_margin") => Some(SweepFamily::AbstainMargin),
            Some(other) => return Err(Error::config(format!("unknown sweep.family {other:?}"))),
        };
        let rho_grid = raw.take_with("sweep.rho", parse_list)?.unwrap_or_else(|| {
            let mut grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            grid.push(1.01);
            grid
        });
        let latency_reps = raw.take("sweep.latency_reps")?.unwrap_or(0);

        let in_domain = match raw.take::<String>("eval.in_domain")?.as_deref() {
            None | Some("class") => InDomainBy::Class,
            Some("teacher_margin") => InDomainBy::TeacherMargin,
            Some(other) => return Err(Error::config(format!("unknown eval.in_domain {other:?}"))),
        };
        let in_domain_threshold = raw.take("eval.in_domain_threshold")?.unwrap_or(0.4);

        let cost = match raw.take::<String>("cost.preset")?.as_deref() {
            None | Some("resnet32_efficientnet_l2") => {
                CostSetting::Fixed(CostModel::resnet32_efficientnet_l2())
            }
            Some("macs") => CostSetting::Macs,
            Some("custom") => CostSetting::Fixed(CostModel::new(
                raw.take("cost.student")?
                    .ok_or_else(|| Error::config("cost.student missing"))?,
                raw.take("cost.teacher")?
                    .ok_or_else(|| Error::config("cost.teacher missing"))?,
                &raw.take::<String>("cost.unit")?
                    .unwrap_or_else(|| "units".into()),
            )?),
            Some(other) => return Err(Error::config(format!("unknown cost.preset {other:?}"))),
        };

        let report_variants = raw
            .take_with("report.variants", |s| {
                s.split(';')
                    .filter(|t| !t.trim().is_empty())
                    .map(str::parse)
                    .collect()
            })?
            .unwrap_or_default();
        let report_rho = raw.take("report.rho")?.unwrap_or(0.5);
        raw.finish()?;

        let mut cfg = ExperimentConfig {
            seed,
            out_dir,
            data,
            test_set,
            teacher_kind,
            teacher_eta,
            teacher,
            student,
            distill,
            student_name,
            sweep_family,
            rho_grid,
            in_domain,
            in_domain_threshold,
            cost,
            latency_reps,
            report_variants,
            report_rho,
        };
        if cfg.student_name.is_none() {
            cfg.student_name = Some(cfg.student_name());
        }
        cfg.reseed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the global seed and every seed derived from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = stage_seed(seed, Stage::Data);
        self.teacher.train.shuffle_seed = stage_seed(seed, Stage::TeacherShuffle);
        self.student.train.shuffle_seed = stage_seed(seed, Stage::StudentShuffle);
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.distill.validate(self.data.num_classes)?;
        if self.teacher_kind == TeacherKind::Oracle {
            TeacherOracle::oracle(self.teacher_eta, self.data.num_classes)?;
        }
        if self.rho_grid.is_empty() {
            return Err(Error::config("sweep.rho is empty"));
        }
        if self
            .rho_grid
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt()))
        {
            return Err(Error::config("sweep.rho must be ascending"));
        }
        if self.in_domain == InDomainBy::Class && self.distill.l_in.is_empty() {
            return Err(Error::config("eval.in_domain=class needs distill.l_in"));
        }
        for spec in &self.report_variants {
            self.variant_config(spec).validate(self.data.num_classes)?;
        }
        if let Some(name) = &self.student_name {
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(Error::config(format!("bad distill.name {name:?}")));
            }
        }
        Ok(())
    }

    /// Frozen, fully-resolved config text (loads back to the same config).
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("data.classes", self.data.num_classes.to_string());
        kv("data.dim", self.data.dim.to_string());
        kv("data.zipf", self.data.zipf_exponent.to_string());
        kv("data.radius", self.data.radius.to_string());
        kv("data.sigma", self.data.sigma.to_string());
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_test", self.data.n_test.to_string());
        kv("data.balanced_test", self.data.balanced_test.to_string());
        kv(
            "eval.test_set",
            match self.test_set {
                TestSet::Balanced => "balanced",
                TestSet::Imbalanced => "imbalanced",
            }
            .into(),
        );
        kv(
            "teacher.kind",
            match self.teacher_kind {
                TeacherKind::Trained => "trained",
                TeacherKind::Oracle => "oracle",
            }
            .into(),
        );
        kv("teacher.eta", self.teacher_eta.to_string());
        for (prefix, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            kv(&format!("{prefix}.hidden"), join(&m.hidden));
            kv(&format!("{prefix}.lr"), m.train.learning_rate.to_string());
            kv(&format!("{prefix}.epochs"), m.train.epochs.to_string());
            kv(
                &format!("{prefix}.batch_size"),
                m.train.batch_size.to_string(),
            );
        }
        let d = &self.distill;
        kv("distill.variant", d.variant.to_string());
        kv("distill.a", d.a.to_string());
        kv("distill.b", d.b.to_string());
        kv("distill.tau", d.tau.to_string());
        kv("distill.alpha", d.alpha.to_string());
        kv("distill.rho_tr", d.rho_tr.to_string());
        kv("distill.l_in", join(&d.l_in));
        kv("distill.margin_space", d.margin_space.to_string());
        kv("distill.name", self.student_name());
        kv(
            "sweep.family",
            match self.sweep_family {
                None => "auto",
                Some(SweepFamily::Margin) => "margin",
                Some(SweepFamily::AbstainMargin) => "abstain_margin",
            }
            .into(),
        );
        kv("sweep.rho", join(&self.rho_grid));
        kv("sweep.latency_reps", self.latency_reps.to_string());
        kv(
            "eval.in_domain",
            match self.in_domain {
                InDomainBy::Class => "class",
                InDomainBy::TeacherMargin => "teacher_margin",
            }
            .into(),
        );
        kv(
            "eval.in_domain_threshold",
            self.in_domain_threshold.to_string(),
        );
        match &self.cost {
            CostSetting::Macs => kv("cost.preset", "macs".into()),
            CostSetting::Fixed(c) => {
                kv("cost.preset", "custom".into());
                kv("cost.student", c.student_cost.to_string());
                kv("cost.teacher", c.teacher_cost.to_string());
                kv("cost.unit", c.unit.clone());
            }
        }
        let variants: Vec<String> = self.report_variants.iter().map(|v| v.to_string()).collect();
        kv("report.variants", variants.join(";"));
        kv("report.rho", self.report_rho.to_string());
        out
    }

    pub fn student_name(&self) -> String {
        self.student_name
            .clone()
            .unwrap_or_else(|| self.distill.variant.name().to_ascii_lowercase())
    }

    pub fn variant_config(&self, spec: &VariantSpec) -> DistillConfig {
        let mut cfg = self.distill.clone();
        cfg.variant = spec.variant;
        if let Some(a) = spec.alpha {
            cfg.alpha = a;
        }
        if let Some(r) = spec.rho_tr {
            cfg.rho_tr = r;
        }
        cfg
    }

    pub fn teacher_widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.dim];
        w.extend(&self.teacher.hidden);
        w.push(self.data.num_classes);
        w
    }

    pub fn student_widths(&self, distill: &DistillConfig) -> Vec<usize> {
        let mut w = vec![self.data.dim];
        w.extend(&self.student.hidden);
        w.push(distill.output_width(self.data.num_classes));
        w
    }

    pub fn sweep_family(&self) -> SweepFamily {
        self.sweep_family.unwrap_or(match self.distill.variant {
            Variant::Cd3 | Variant::MdAbstain => SweepFamily::AbstainMargin,
            _ => SweepFamily::Margin,
        })
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("data/train.data")
    }
    pub fn test_balanced(&self) -> PathBuf {
        self.root.join("data/test_balanced.data")
    }
    pub fn test_imbalanced(&self) -> PathBuf {
        self.root.join("data/test_imbalanced.data")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.net")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("teacher.scores")
    }
    pub fn student(&self, name: &str) -> PathBuf {
        self.root.join("students").join(format!("{name}.net"))
    }
    pub fn sweep_csv(&self, name: &str) -> PathBuf {
        self.root.join("sweep").join(format!("{name}.csv"))
    }
    pub fn latency(&self, name: &str) -> PathBuf {
        self.root.join("sweep").join(format!("{name}.latency.txt"))
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A config bound to a run directory.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub paths: RunPaths,
}

/// What a command produced, for the CLI to print.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let paths = RunPaths::new(cfg.out_dir.clone());
        Runner { cfg, paths }
    }

    fn freeze_config(&self, outcome: &mut Outcome) -> Result<()> {
        let path = self.paths.resolved_config();
        write_file(&path, self.cfg.resolved_text().as_bytes())?;
        outcome.written.push(path);
        Ok(())
    }

    fn load_train(&self) -> Result<Dataset> {
        require(&self.paths.train(), "gen-data")?;
        Dataset::load(&self.paths.train())
    }

    fn load_test(&self) -> Result<Dataset> {
        let path = match self.cfg.test_set {
            TestSet::Balanced => self.paths.test_balanced(),
            TestSet::Imbalanced => self.paths.test_imbalanced(),
        };
        require(&path, "gen-data")?;
        Dataset::load(&path)
    }

    fn load_teacher(&self) -> Result<TeacherOracle> {
        match self.cfg.teacher_kind {
            TeacherKind::Oracle => {
                TeacherOracle::oracle(self.cfg.teacher_eta, self.cfg.data.num_classes)
            }
            TeacherKind::Trained => {
                require(&self.paths.teacher(), "train-teacher")?;
                Ok(TeacherOracle::Trained(Network::load(
                    &self.paths.teacher(),
                )?))
            }
        }
    }

    fn load_scores(&self) -> Result<TeacherScoreCache> {
        require(&self.paths.scores(), "cache-scores")?;
        TeacherScoreCache::load(&self.paths.scores())
    }

    fn cost_model(&self, student: &Network, teacher: &TeacherOracle) -> CostModel {
        match &self.cfg.cost {
            CostSetting::Macs => CostModel::from_macs(student, teacher),
            CostSetting::Fixed(c) => c.clone(),
        }
    }

    fn in_domain_mask(&self, teacher: &TeacherOracle, test: &Dataset) -> Result<InDomainMask> {
        match self.cfg.in_domain {
            InDomainBy::Class => Ok(InDomainMask::by_class(
                test.labels(),
                &self.cfg.distill.l_in,
            )),
            InDomainBy::TeacherMargin => {
                InDomainMask::by_teacher_margin(teacher, test, self.cfg.in_domain_threshold)
            }
        }
    }

    pub fn gen_data(&self) -> Result<Outcome> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        outcome.notes.extend(self.cfg.data.warnings());
        let mixture = Mixture::new(&self.cfg.data)?;
        for (path, data) in [
            (self.paths.train(), mixture.train_set()),
            (self.paths.test_balanced(), mixture.balanced_test_set()),
            (self.paths.test_imbalanced(), mixture.imbalanced_test_set()),
        ] {
            write_file(&path, data.to_text().as_bytes())?;
            outcome.written.push(path);
        }
        Ok(outcome)
    }

    pub fn train_teacher(&self) -> Result<Outcome> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        if self.cfg.teacher_kind == TeacherKind::Oracle {
            outcome
                .notes
                .push("oracle teacher: nothing to train".to_string());
            return Ok(outcome);
        }
        let train = self.load_train()?;
        let init = Network::new(
            &self.cfg.teacher_widths(),
            stage_seed(self.cfg.seed, Stage::TeacherInit),
        )?;
        let teacher = train_on_labels(&init, &train, &self.cfg.teacher.train)?;
        let mut bytes = Vec::new();
        teacher
            .write_to(&mut bytes)
            .map_err(|e| Error::io(self.paths.teacher(), e))?;
        write_file(&self.paths.teacher(), &bytes)?;
        outcome.written.push(self.paths.teacher());
        Ok(outcome)
    }

    pub fn cache_scores(&self) -> Result<Outcome> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        let train = self.load_train()?;
        let teacher = self.load_teacher()?;
        let cache = score_cache(&teacher, &train, self.cfg.distill.tau)?;
        write_file(&self.paths.scores(), &cache.to_bytes())?;
        outcome.written.push(self.paths.scores());
        Ok(outcome)
    }

    fn distill_one(
        &self,
        cfg: &DistillConfig,
        name: &str,
        outcome: &mut Outcome,
    ) -> Result<Network> {
        let train = self.load_train()?;
        let cache = self.load_scores()?;
        outcome.notes.extend(cfg.warnings());
        let init = Network::new(
            &self.cfg.student_widths(cfg),
            stage_seed(self.cfg.seed, Stage::StudentInit),
        )?;
        let student = distill::distill_train(&init, &train, &cache, cfg, &self.cfg.student.train)?;
        let path = self.paths.student(name);
        let mut bytes = Vec::new();
        student
            .write_to(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        write_file(&path, &bytes)?;
        outcome.written.push(path);
        Ok(student)
    }

    pub fn distill(&self) -> Result<Outcome> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        self.distill_one(&self.cfg.distill, &self.cfg.student_name(), &mut outcome)?;
        Ok(outcome)
    }

    pub fn sweep(&self) -> Result<Outcome> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        let name = self.cfg.student_name();
        let student_path = self.paths.student(&name);
        require(&student_path, "distill")?;
        let student = Network::load(&student_path)?;
        let teacher = self.load_teacher()?;
        let test = self.load_test()?;
        let d = &self.cfg.distill;
        let space = LabelSpace::for_variant(d.variant, self.cfg.data.num_classes, &d.l_in);
        let mask = self.in_domain_mask(&teacher, &test)?;
        let cost = self.cost_model(&student, &teacher);
        let points = eval::sweep(
            &student,
            &space,
            &teacher,
            &test,
            &mask,
            self.cfg.sweep_family(),
            &self.cfg.rho_grid,
            &cost,
        )?;
        let csv = self.paths.sweep_csv(&name);
        ensure_parent(&csv)?;
        let files = eval::emit_report(&points, &cost.unit, &csv)?;
        outcome.written.push(files.csv);
        outcome.written.push(files.svg);
        if self.cfg.latency_reps > 0 {
            let student_lat = eval::measure_latency(&student, &test, self.cfg.latency_reps)?;
            let mut text = format!(
                "student median_s={:e} p90_s={:e}\n",
                student_lat.median, student_lat.p90
            );
            if let TeacherOracle::Trained(net) = &teacher {
                let t = eval::measure_latency(net, &test, self.cfg.latency_reps)?;
                let _ = writeln!(text, "teacher median_s={:e} p90_s={:e}", t.median, t.p90);
            }
            write_file(&self.paths.latency(&name), text.as_bytes())?;
            outcome.written.push(self.paths.latency(&name));
        }
        Ok(outcome)
    }

    /// Delegation rule used for a variant's row in the comparison table.
    pub fn table_policy(&self, cfg: &DistillConfig) -> DelegationPolicy {
        match cfg.variant {
            Variant::Baseline => DelegationPolicy::MarginBased { rho: 0.0 },
            Variant::Cd1 | Variant::Cd2 => DelegationPolicy::ClassBased {
                l_in: cfg.l_in.clone(),
            },
            Variant::Cd3 => DelegationPolicy::AbstainBased,
            Variant::MdLs => DelegationPolicy::MarginBased {
                rho: self.cfg.report_rho,
            },
            Variant::MdAbstain => DelegationPolicy::AbstainMargin {
                rho: self.cfg.report_rho,
            },
        }
    }

    pub fn report(&self) -> Result<(Outcome, Vec<ComparisonRow>)> {
        let mut outcome = Outcome::default();
        self.freeze_config(&mut outcome)?;
        if self.cfg.report_variants.is_empty() {
            return Err(Error::config("report.variants is empty"));
        }
        let teacher = self.load_teacher()?;
        let test = self.load_test()?;
        let mask = self.in_domain_mask(&teacher, &test)?;
        let mut rows = Vec::new();
        for spec in &self.cfg.report_variants {
            let cfg = self.cfg.variant_config(spec);
            let name = format!("report_{}", spec.file_name());
            let student = self.distill_one(&cfg, &name, &mut outcome)?;
            let space = LabelSpace::for_variant(cfg.variant, self.cfg.data.num_classes, &cfg.l_in);
            let policy = self.table_policy(&cfg);
            let decisions = eval::evaluate(&student, &space, &teacher, &policy, &test)?;
            let overall = eval::in_domain_accuracy(
                &decisions,
                test.labels(),
                &InDomainMask::all(test.len()),
            )?
            .expect("nonempty test set");
            let in_domain = eval::in_domain_accuracy(&decisions, test.labels(), &mask)?;
            rows.push(ComparisonRow {
                approach: spec.label(),
                in_domain_acc: in_domain.map_or(f64::NAN, |s| s.accuracy),
                in_domain_fraction: in_domain.map_or(f64::NAN, |s| s.fraction_student),
                overall_acc: overall.accuracy,
                overall_fraction: overall.fraction_student,
            });
        }
        write_file(
            &self.paths.report_csv(),
            eval::comparison_csv(&rows).as_bytes(),
        )?;
        write_file(
            &self.paths.report_txt(),
            eval::comparison_table(&rows).as_bytes(),
        )?;
        outcome.written.push(self.paths.report_csv());
        outcome.written.push(self.paths.report_txt());
        Ok((outcome, rows))
    }
}

/// Trains a network on one-hot labels at temperature 1.
pub fn train_on_labels(init: &Network, data: &Dataset, spec: &TrainSpec) -> Result<Network> {
    let targets: Vec<ProbDist> = data
        .labels()
        .iter()
        .map(|&y| ProbDist::one_hot(y, data.num_classes()))
        .collect::<Result<_>>()?;
    let examples: Vec<Example<'_>> = targets
        .iter()
        .enumerate()
        .map(|(i, target)| Example {
            features: data.features(i),
            target,
        })
        .collect();
    nn::train(init, &examples, spec, 1.0)
}

/// Teacher logits for every training example.
pub fn score_cache(teacher: &TeacherOracle, data: &Dataset, tau: f64) -> Result<TeacherScoreCache> {
    match teacher {
        TeacherOracle::Trained(net) => {
            let tag = format!("mlp-{}", join(&net.widths()[1..net.widths().len() - 1]));
            TeacherScoreCache::from_network(net, data, tau, &tag)
        }
        TeacherOracle::Oracle { eta, .. } => {
            let rows = crate::par::try_map_indexed(data.len(), Exec::default(), |i| {
                teacher.logits(data.features(i), Some(data.labels()[i]))
            })?;
            TeacherScoreCache::new(&rows, data.num_classes(), tau, &format!("oracle-eta{eta}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
seed = 3
out_dir = somewhere
data.classes = 4
data.dim = 2
data.n_train = 100
data.n_test = 40
distill.variant = CD1
distill.l_in = top:2   # head classes
report.variants = BASELINE;CD1:alpha=0.6;CD3
";

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::parse(MINIMAL, "mem").unwrap();
        assert_eq!(cfg.distill.l_in, vec![0, 1]);
        assert_eq!(cfg.report_variants.len(), 3);
        assert_eq!(cfg.report_variants[1].alpha, Some(0.6));
        assert_eq!(cfg.student_widths(&cfg.distill), vec![2, 8, 4]);
        let cd3 = cfg.variant_config(&cfg.report_variants[2]);
        assert_eq!(cfg.student_widths(&cd3), vec![2, 8, 3]);

        let resolved = cfg.resolved_text();
        let again = ExperimentConfig::parse(&resolved, "resolved").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.resolved_text(), resolved);
    }

    #[test]
    fn widths_key_sets_hidden_layers() {
        let text = format!("{MINIMAL}student.widths = 2,32,4\n");
        let cfg = ExperimentConfig::parse(&text, "mem").unwrap();
        assert_eq!(cfg.student.hidden, vec![32]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = format!("{MINIMAL}bogus.key = 1\n");
        let err = ExperimentConfig::parse(&text, "mem")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("line 10") && err.contains("bogus.key"),
            "{err}"
        );

        let err = ExperimentConfig::parse("seed = x\n", "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");

        let err = ExperimentConfig::parse("seed = 1\nseed = 2\n", "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");

        assert!(ExperimentConfig::parse("just words\n", "mem").is_err());
        assert!(ExperimentConfig::parse("sweep.rho = 0.5,0.1\ndistill.l_in=0\n", "mem").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: Vec<u64> = [
            Stage::Data,
            Stage::TeacherInit,
            Stage::TeacherShuffle,
            Stage::StudentInit,
            Stage::StudentShuffle,
        ]
        .iter()
        .map(|&s| stage_seed(7, s))
        .collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert_eq!(stage_seed(7, Stage::Data), stage_seed(7, Stage::Data));
    }

    #[test]
    fn missing_prerequisites_name_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::parse(MINIMAL, "mem").unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        let runner = Runner::new(cfg);
        let err = runner.train_teacher().unwrap_err();
        assert!(matches!(
            err,
            Error::MissingArtifact {
                command: "gen-data",
                ..
            }
        ));
        runner.gen_data().unwrap();
        let err = runner.cache_scores().unwrap_err();
        assert!(matches!(
            err,
            Error::MissingArtifact {
                command: "train-teacher",
                ..
            }
        ));
        let err = runner.sweep().unwrap_err();
        assert!(matches!(
            err,
            Error::MissingArtifact {
                command: "distill",
                ..
            }
        ));
    }
}
