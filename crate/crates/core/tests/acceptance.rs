//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_distill::cascade::{bayes_reject, LabelSpace, RejectOutcome, TeacherOracle};
use cascade_distill::datagen::{Dataset, Mixture};
use cascade_distill::distill::{self, DistillConfig, TeacherScoreCache, Variant};
use cascade_distill::eval::{self, CostModel, InDomainMask, SweepFamily};
use cascade_distill::nn::{self, softmax_cross_entropy};
use cascade_distill::par::Exec;
use cascade_distill::pipeline::{ExperimentConfig, Runner, TeacherKind};
use cascade_distill::{Network, ProbDist};

const SUM_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-8;
const MARGIN_DROP: f64 = 0.05;
const ACC_SLACK: f64 = 0.01;
const COST_RATIO: f64 = 0.6;

const BUDGET_VALIDITY: Duration = Duration::from_secs(5);
const BUDGET_GRADIENT: Duration = Duration::from_secs(30);
const BUDGET_DICHOTOMY: Duration = Duration::from_secs(120);
const BUDGET_TRADEOFF: Duration = Duration::from_secs(300);

type Check = Result<String, String>;
type CriterionFn<'a> = Box<dyn Fn() -> Check + 'a>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn reference_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.cfg");
    let mut cfg = ExperimentConfig::load(&path).expect("reference config loads");
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Reference run with data, trained teacher and cached scores.
struct Fixture {
    _dir: tempfile::TempDir,
    runner: Runner,
    setup_time: Duration,
}

impl Fixture {
    fn build() -> Result<Self, String> {
        let start = Instant::now();
        let dir = tempfile::tempdir().map_err(e2s)?;
        let runner = Runner::new(reference_config(dir.path()));
        runner.gen_data().map_err(e2s)?;
        runner.train_teacher().map_err(e2s)?;
        runner.cache_scores().map_err(e2s)?;
        Ok(Fixture {
            _dir: dir,
            runner,
            setup_time: start.elapsed(),
        })
    }

    fn with_distill(&self, cfg: DistillConfig, name: &str) -> Runner {
        let mut exp = self.runner.cfg.clone();
        exp.distill = cfg;
        exp.student_name = Some(name.to_string());
        Runner::new(exp)
    }

    fn test_set(&self) -> Dataset {
        Dataset::load(&self.runner.paths.test_balanced()).expect("test set")
    }

    fn teacher(&self) -> TeacherOracle {
        TeacherOracle::Trained(Network::load(&self.runner.paths.teacher()).expect("teacher"))
    }
}

fn random_logits(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..20.0);
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_subset(rng: &mut ChaCha8Rng, num_classes: usize) -> Vec<usize> {
    loop {
        let subset: Vec<usize> = (0..num_classes).filter(|_| rng.random_bool(0.5)).collect();
        if !subset.is_empty() {
            return subset;
        }
    }
}

fn check_dist(p: &ProbDist, what: &str) -> Result<(), String> {
    let sum: f64 = p.as_slice().iter().sum();
    ensure(
        (sum - 1.0).abs() < SUM_TOL && p.as_slice().iter().all(|&v| v >= 0.0),
        format!("{what} produced {:?}", p.as_slice()),
    )
}

fn distribution_validity() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 10_000;
    for _ in 0..trials {
        let num_classes = rng.random_range(2..=12);
        let logits = random_logits(&mut rng, num_classes);
        let y = rng.random_range(0..num_classes);
        let alpha = rng.random_range(0.0..=1.0);
        let tau = rng.random_range(0.05..10.0);
        let l_in = random_subset(&mut rng, num_classes);
        let easy = rng.random_bool(0.5);
        check_dist(
            &distill::pseudo_label_baseline(&logits, tau).map_err(e2s)?,
            "BASELINE",
        )?;
        check_dist(
            &distill::pseudo_label_cd1(y, &logits, alpha, &l_in, tau).map_err(e2s)?,
            "CD1",
        )?;
        check_dist(
            &distill::pseudo_label_cd2(y, &logits, &l_in, tau).map_err(e2s)?,
            "CD2",
        )?;
        check_dist(
            &distill::pseudo_label_cd3(y, &logits, &l_in, tau).map_err(e2s)?,
            "CD3",
        )?;
        check_dist(
            &distill::pseudo_label_md_ls(y, &logits, easy, alpha, tau).map_err(e2s)?,
            "MD_LS",
        )?;
        check_dist(
            &distill::pseudo_label_md_abstain(y, &logits, easy, tau).map_err(e2s)?,
            "MD_ABSTAIN",
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < BUDGET_VALIDITY, format!("took {elapsed:?}"))?;
    Ok(format!("{trials} trials x 6 builders in {elapsed:.2?}"))
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let nets = 100;
    for k in 0..nets {
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=6)).collect();
        let mut net = Network::new(&widths, k).map_err(e2s)?;
        // random biases keep every ReLU pre-activation off its kink
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..widths[0])
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let raw: Vec<f64> = (0..widths[depth])
            .map(|_| rng.random_range(0.01..1.0))
            .collect();
        let total: f64 = raw.iter().sum();
        let target = ProbDist::new(raw.iter().map(|v| v / total).collect()).map_err(e2s)?;
        let tau = rng.random_range(0.5..3.0);
        let analytic = net.loss_grad(&x, &target, tau).map_err(e2s)?.grad;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            plus.params_mut()[i] += GRAD_STEP;
            let mut minus = net.clone();
            minus.params_mut()[i] -= GRAD_STEP;
            let lp = softmax_cross_entropy(&target, plus.forward(&x).map_err(e2s)?.as_slice(), tau)
                .map_err(e2s)?;
            let lm =
                softmax_cross_entropy(&target, minus.forward(&x).map_err(e2s)?.as_slice(), tau)
                    .map_err(e2s)?;
            let numeric = (lp - lm) / (2.0 * GRAD_STEP);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst < GRAD_REL_TOL,
        format!("max relative error {worst:e}"),
    )?;
    ensure(elapsed < BUDGET_GRADIENT, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{nets} nets, max relative error {worst:.2e}, {elapsed:.2?}"
    ))
}

fn bits(p: &ProbDist) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn reduction_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 2_000;
    for _ in 0..trials {
        let num_classes = rng.random_range(2..=12);
        let logits = random_logits(&mut rng, num_classes);
        let student = random_logits(&mut rng, num_classes);
        let y = rng.random_range(0..num_classes);
        let tau = rng.random_range(0.1..5.0);
        let alpha = rng.random_range(0.0..=1.0);

        for variant in [Variant::Baseline, Variant::Cd1, Variant::MdLs] {
            let mut cfg =
                DistillConfig::new(variant).with_l_in(random_subset(&mut rng, num_classes));
            cfg.a = 1.0;
            cfg.b = 0.0;
            cfg.tau = tau;
            cfg.alpha = alpha;
            let objective = distill::distill_objective(y, &logits, &student, &cfg).map_err(e2s)?;
            let one_hot = ProbDist::one_hot(y, num_classes).map_err(e2s)?;
            let plain = softmax_cross_entropy(&one_hot, &student, tau).map_err(e2s)?;
            ensure(
                objective.to_bits() == plain.to_bits(),
                format!("(a) {variant}: {objective} != {plain}"),
            )?;
        }

        let all: Vec<usize> = (0..num_classes).collect();
        let cd1 = distill::pseudo_label_cd1(y, &logits, alpha, &all, tau).map_err(e2s)?;
        let base = distill::pseudo_label_baseline(&logits, tau).map_err(e2s)?;
        ensure(
            bits(&cd1) == bits(&base),
            "(b) CD1 with full l_in differs from BASELINE",
        )?;
    }

    let num_classes = 10;
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| random_logits(&mut rng, num_classes))
        .collect();
    let labels: Vec<usize> = (0..rows.len())
        .map(|_| rng.random_range(0..num_classes))
        .collect();
    let cache = TeacherScoreCache::new(&rows, num_classes, 1.0, "random").map_err(e2s)?;
    let min_margin = rows
        .iter()
        .map(|r| distill::teacher_margin(&nn::softmax(r, 1.0).unwrap()).unwrap())
        .fold(f64::INFINITY, f64::min);
    let mut md = DistillConfig::new(Variant::MdLs);
    md.alpha = 0.7;
    md.rho_tr = min_margin / 2.0;
    let base_cfg = DistillConfig::new(Variant::Baseline);
    let md_targets = distill::pseudo_labels(&labels, &cache, &md, Exec::default()).map_err(e2s)?;
    let base_targets =
        distill::pseudo_labels(&labels, &cache, &base_cfg, Exec::default()).map_err(e2s)?;
    ensure(
        md_targets
            .iter()
            .zip(&base_targets)
            .all(|(m, b)| bits(m) == bits(b)),
        "(c) MD_LS below every margin differs from BASELINE",
    )?;
    Ok(format!(
        "(a),(b) over {trials} random cases; (c) over 1000 rows with rho_tr={:.2e}",
        md.rho_tr
    ))
}

fn student_only_accuracy(student: &Network, data: &Dataset) -> f64 {
    let correct = (0..data.len())
        .filter(|&i| student.forward(data.features(i)).unwrap().argmax() == data.labels()[i])
        .count();
    correct as f64 / data.len() as f64
}

fn baseline_student(fx: &Fixture) -> Result<Network, String> {
    let runner = fx.with_distill(
        fx.runner.cfg.variant_config(&"BASELINE".parse().unwrap()),
        "baseline",
    );
    let path = runner.paths.student("baseline");
    if !path.exists() {
        runner.distill().map_err(e2s)?;
    }
    Network::load(&path).map_err(e2s)
}

fn sweep_endpoints(fx: &Fixture) -> Check {
    let student = baseline_student(fx)?;
    let test = fx.test_set();
    let teacher = fx.teacher();
    let space = LabelSpace::Full { num_classes: 10 };
    let mask = InDomainMask::by_class(test.labels(), &fx.runner.cfg.distill.l_in);
    let cost = CostModel::resnet32_efficientnet_l2();
    let points = eval::sweep(
        &student,
        &space,
        &teacher,
        &test,
        &mask,
        SweepFamily::Margin,
        &[0.0, 1.01],
        &cost,
    )
    .map_err(e2s)?;
    let student_acc = student_only_accuracy(&student, &test);
    let TeacherOracle::Trained(teacher_net) = &teacher else {
        unreachable!()
    };
    let teacher_acc = student_only_accuracy(teacher_net, &test);
    ensure(
        points[0].fraction_student == 1.0,
        "rho=0 fraction_student != 1",
    )?;
    ensure(
        points[0].overall_acc == student_acc,
        format!(
            "rho=0 accuracy {} != student-only {student_acc}",
            points[0].overall_acc
        ),
    )?;
    ensure(
        points[1].fraction_student == 0.0,
        "rho=1.01 fraction_student != 0",
    )?;
    ensure(
        points[1].overall_acc == teacher_acc,
        format!(
            "rho=1.01 accuracy {} != teacher-only {teacher_acc}",
            points[1].overall_acc
        ),
    )?;
    Ok(format!(
        "student-only {student_acc:.4}, teacher-only {teacher_acc:.4}"
    ))
}

fn oracle_monotonicity() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = reference_config(dir.path());
    cfg.teacher_kind = TeacherKind::Oracle;
    cfg.teacher_eta = 1.0;
    cfg.distill = cfg.variant_config(&"BASELINE".parse().unwrap());
    cfg.student_name = Some("oracle_student".into());
    let runner = Runner::new(cfg);
    runner.gen_data().map_err(e2s)?;
    runner.cache_scores().map_err(e2s)?;
    runner.distill().map_err(e2s)?;
    let student = Network::load(&runner.paths.student("oracle_student")).map_err(e2s)?;
    let teacher = TeacherOracle::oracle(1.0, 10).map_err(e2s)?;
    let test = Dataset::load(&runner.paths.test_balanced()).map_err(e2s)?;
    let space = LabelSpace::Full { num_classes: 10 };
    let mask = InDomainMask::all(test.len());
    let cost = CostModel::resnet32_efficientnet_l2();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut grids: Vec<Vec<f64>> = vec![(0..=202).map(|i| i as f64 / 200.0).collect()];
    for _ in 0..20 {
        let mut grid: Vec<f64> = (0..rng.random_range(2..40))
            .map(|_| rng.random_range(0.0..1.01))
            .collect();
        grid.sort_by(f64::total_cmp);
        grids.push(grid);
    }
    let mut violations = 0;
    let mut points_checked = 0;
    for grid in &grids {
        let points = eval::sweep(
            &student,
            &space,
            &teacher,
            &test,
            &mask,
            SweepFamily::Margin,
            grid,
            &cost,
        )
        .map_err(e2s)?;
        points_checked += points.len();
        violations += points
            .windows(2)
            .filter(|w| w[1].overall_acc < w[0].overall_acc)
            .count();
    }
    ensure(violations == 0, format!("{violations} violations"))?;
    Ok(format!(
        "{} grids, {points_checked} points, 0 violations",
        grids.len()
    ))
}

fn dichotomy_trend(fx: &Fixture) -> Check {
    let start = Instant::now();
    let test = fx.test_set();
    let l_in = fx.runner.cfg.distill.l_in.clone();
    let mask = InDomainMask::by_class(test.labels(), &l_in);
    let space = LabelSpace::for_variant(Variant::Cd1, 10, &l_in);
    let teacher = fx.teacher();
    let cost = CostModel::resnet32_efficientnet_l2();
    let rhos = [0.2, 0.4];
    let mut stats = Vec::new();
    for alpha in [0.0, 0.9] {
        let mut cfg = fx.runner.cfg.distill.clone();
        cfg.variant = Variant::Cd1;
        cfg.alpha = alpha;
        let name = format!("cd1_alpha{alpha}");
        let runner = fx.with_distill(cfg, &name);
        runner.distill().map_err(e2s)?;
        let student = Network::load(&runner.paths.student(&name)).map_err(e2s)?;
        let outputs =
            eval::student_outputs(&student, &space, &test, Exec::default()).map_err(e2s)?;
        let ood: Vec<f64> = outputs
            .iter()
            .zip(test.labels())
            .filter(|(_, y)| !l_in.contains(y))
            .map(|(o, _)| o.margin)
            .collect();
        let ood_margin = ood.iter().sum::<f64>() / ood.len() as f64;
        let points = eval::sweep(
            &student,
            &space,
            &teacher,
            &test,
            &mask,
            SweepFamily::Margin,
            &rhos,
            &cost,
        )
        .map_err(e2s)?;
        stats.push((
            ood_margin,
            points[0].in_domain_fraction,
            points[1].in_domain_fraction,
        ));
    }
    let elapsed = start.elapsed();
    let (lo, hi) = (stats[0], stats[1]);
    let detail = format!(
        "ood margin {:.4} -> {:.4}; in-domain fraction@0.2 {:.4} -> {:.4}, @0.4 {:.4} -> {:.4}; {elapsed:.2?}",
        lo.0, hi.0, lo.1, hi.1, lo.2, hi.2
    );
    ensure(lo.0 - hi.0 >= MARGIN_DROP, detail.clone())?;
    ensure(hi.1 > lo.1 && hi.2 > lo.2, detail.clone())?;
    ensure(elapsed < BUDGET_DICHOTOMY, detail.clone())?;
    Ok(detail)
}

fn tradeoff_shape(fx: &Fixture) -> Check {
    let start = Instant::now();
    let student = baseline_student(fx)?;
    let test = fx.test_set();
    let teacher = fx.teacher();
    let cost = CostModel::resnet32_efficientnet_l2();
    let mask = InDomainMask::by_class(test.labels(), &fx.runner.cfg.distill.l_in);
    let space = LabelSpace::Full { num_classes: 10 };
    let grid = &fx.runner.cfg.rho_grid;
    let points = eval::sweep(
        &student,
        &space,
        &teacher,
        &test,
        &mask,
        SweepFamily::Margin,
        grid,
        &cost,
    )
    .map_err(e2s)?;
    let TeacherOracle::Trained(teacher_net) = &teacher else {
        unreachable!()
    };
    let teacher_acc = student_only_accuracy(teacher_net, &test);
    let budget = COST_RATIO * cost.teacher_cost;
    let elapsed = start.elapsed() + fx.setup_time;
    let hit = points
        .iter()
        .filter(|p| p.overall_acc >= teacher_acc - ACC_SLACK && p.expected_cost <= budget)
        .max_by(|a, b| a.overall_acc.total_cmp(&b.overall_acc));
    ensure(elapsed < BUDGET_TRADEOFF, format!("took {elapsed:?}"))?;
    match hit {
        Some(p) => Ok(format!(
            "rho={} acc {:.4} (teacher {teacher_acc:.4}) at cost {:.3e} <= {budget:.3e}; {elapsed:.2?}",
            p.rho, p.overall_acc, p.expected_cost
        )),
        None => Err(format!("no rho reaches {:.4} under {budget:.3e}", teacher_acc - ACC_SLACK)),
    }
}

fn bayes_reject_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let costs: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    for _ in 0..1000 {
        let len = rng.random_range(2..=10);
        let mut raw: Vec<f64> = (0..len)
            .map(|_| rng.random_range(0.0..1.0f64).powi(3))
            .collect();
        if rng.random_bool(0.2) {
            // exact ties and thresholds on a dyadic grid
            raw = (0..len).map(|_| rng.random_range(0..4) as f64).collect();
            raw[0] += 1.0;
        }
        let total: f64 = raw.iter().sum();
        let post = ProbDist::new(raw.iter().map(|v| v / total).collect()).map_err(e2s)?;
        for &c in &costs {
            let p = post.as_slice();
            let mut best = 0;
            for k in 1..p.len() {
                if p[k] > p[best] {
                    best = k;
                }
            }
            let expected = if p[best] <= 1.0 - c {
                RejectOutcome::Abstain
            } else {
                RejectOutcome::Predict(best)
            };
            let got = bayes_reject(&post, c).map_err(e2s)?;
            ensure(
                got == expected,
                format!("{p:?} at c={c}: {got:?} vs {expected:?}"),
            )?;
        }
    }

    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = reference_config(dir.path());
    let mixture = Mixture::new(&cfg.data).map_err(e2s)?;
    let test = mixture.balanced_test_set();
    let posteriors: Vec<ProbDist> = (0..test.len())
        .map(|i| mixture.true_posterior(test.features(i)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let mut previous: Option<Vec<bool>> = None;
    let mut sizes = Vec::new();
    for &c in &costs {
        let abstain: Vec<bool> = posteriors
            .iter()
            .map(|p| bayes_reject(p, c).map(|o| o == RejectOutcome::Abstain))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        if let Some(prev) = &previous {
            let nested = abstain
                .iter()
                .zip(prev)
                .all(|(&now, &before)| !now || before);
            ensure(nested, format!("abstention set at c={c} is not nested"))?;
        }
        sizes.push(abstain.iter().filter(|&&a| a).count());
        previous = Some(abstain);
    }
    Ok(format!(
        "20000 exact comparisons; abstention sizes {} .. {} over c in (0,1]",
        sizes[0],
        sizes[sizes.len() - 1]
    ))
}

fn cost_arithmetic() -> Check {
    let model = CostModel::resnet32_efficientnet_l2();
    ensure(
        model.student_cost == 72e6 && model.teacher_cost == 478e9,
        "preset values",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let f: f64 = rng.random_range(0.0..=1.0);
        let got = model.expected_cost(f).map_err(e2s)?;
        let expected = 72e6 + f * 478e9;
        ensure(
            got == expected,
            format!("fraction {f}: {got} != {expected}"),
        )?;
    }
    let spot = model.expected_cost(0.74).map_err(e2s)?;
    ensure(spot == 353_792_000_000.0, format!("spot value {spot}"))?;
    Ok(format!("100 random fractions exact; cost(0.74) = {spot}"))
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn full_pipeline(out: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let runner = Runner::new(reference_config(out));
    runner.gen_data().map_err(e2s)?;
    runner.train_teacher().map_err(e2s)?;
    runner.cache_scores().map_err(e2s)?;
    runner.distill().map_err(e2s)?;
    runner.sweep().map_err(e2s)?;
    runner.report().map_err(e2s)?;
    Ok(snapshot(out))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let out = dir.path().join("run");
    let first = full_pipeline(&out)?;
    std::fs::remove_dir_all(&out).map_err(e2s)?;
    let second = full_pipeline(&out)?;
    let names: Vec<&PathBuf> = first.keys().collect();
    ensure(first.keys().eq(second.keys()), "different file sets")?;
    for (path, bytes) in &first {
        ensure(
            &second[path] == bytes,
            format!("{} differs", path.display()),
        )?;
    }
    let kinds = |ext: &str| {
        names
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .count()
    };
    ensure(
        kinds("csv") >= 2 && kinds("svg") >= 1 && kinds("net") >= 2,
        "expected artifacts missing",
    )?;
    Ok(format!(
        "{} files byte-identical ({} csv, {} svg, {} checkpoints)",
        first.len(),
        kinds("csv"),
        kinds("svg"),
        kinds("net")
    ))
}

fn main() -> ExitCode {
    let fixture = Fixture::build();
    let with_fixture = |f: fn(&Fixture) -> Check| -> Check {
        match &fixture {
            Ok(fx) => f(fx),
            Err(e) => Err(format!("reference run failed: {e}")),
        }
    };
    let criteria: Vec<(&str, CriterionFn<'_>)> = vec![
        ("distribution validity", Box::new(distribution_validity)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("reduction identities", Box::new(reduction_identities)),
        (
            "sweep endpoints",
            Box::new(move || with_fixture(sweep_endpoints)),
        ),
        ("oracle-teacher monotonicity", Box::new(oracle_monotonicity)),
        (
            "dichotomy trend",
            Box::new(move || with_fixture(dichotomy_trend)),
        ),
        (
            "accuracy/cost trade-off",
            Box::new(move || with_fixture(tradeoff_shape)),
        ),
        (
            "bayes reject-option equivalence",
            Box::new(bayes_reject_equivalence),
        ),
        ("cost arithmetic", Box::new(cost_arithmetic)),
        ("pipeline determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
