//! Seeded long-tailed Gaussian-mixture benchmarks.
//!
//! Class `k` has prior proportional to `(k + 1)^-s` (so class 0 is the head),
//! a mean drawn uniformly on a sphere of radius `r`, and shared isotropic
//! noise `sigma^2 I`. Because the generator is known, the exact posterior is
//! available for Bayes-rule comparisons.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::ProbDist;

const MEANS_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const BALANCED_TEST_STREAM: u64 = 2;
const IMBALANCED_TEST_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Zipf exponent of the class priors; 0 gives uniform priors.
    pub zipf_exponent: f64,
    pub radius: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Draw the test set with exactly equal class counts instead of from the priors.
    pub balanced_test: bool,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::config("zipf exponent must be >= 0"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::config("radius must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be positive"));
        }
        Ok(())
    }

    /// `prior_k` proportional to `(k + 1)^-s`.
    pub fn priors(&self) -> ProbDist {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|k| ((k + 1) as f64).powf(-self.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        ProbDist::new_unchecked(raw.into_iter().map(|v| v / total).collect())
    }

    /// Generator warnings that do not prevent generation.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_classes > self.n_train {
            out.push(format!(
                "{} classes but only {} training examples; some classes will be empty",
                self.num_classes, self.n_train
            ));
        }
        out
    }
}

/// A validated spec together with its seeded class means.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    spec: MixtureSpec,
    priors: ProbDist,
    means: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn new(spec: &MixtureSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, MEANS_STREAM);
        let means = (0..spec.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.dim).map(|_| rng_normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| spec.radius * x / norm).collect()
            })
            .collect();
        Ok(Mixture {
            spec: spec.clone(),
            priors: spec.priors(),
            means,
        })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn priors(&self) -> &ProbDist {
        &self.priors
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    fn sample(&self, labels: Vec<usize>, rng: &mut ChaCha8Rng) -> Dataset {
        let d = self.spec.dim;
        let mut features = Vec::with_capacity(labels.len() * d);
        for &y in &labels {
            for j in 0..d {
                features.push(self.means[y][j] + self.spec.sigma * rng_normal(rng));
            }
        }
        Dataset {
            features,
            labels,
            dim: d,
            num_classes: self.spec.num_classes,
            seed: self.spec.seed,
        }
    }

    fn draw_labels(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let index = WeightedIndex::new(self.priors.as_slice()).expect("priors are positive");
        (0..n).map(|_| index.sample(rng)).collect()
    }

    pub fn train_set(&self) -> Dataset {
        let mut rng = stream(self.spec.seed, TRAIN_STREAM);
        let labels = self.draw_labels(self.spec.n_train, &mut rng);
        self.sample(labels, &mut rng)
    }

    /// Test set with labels drawn from the priors.
    pub fn imbalanced_test_set(&self) -> Dataset {
        let mut rng = stream(self.spec.seed, IMBALANCED_TEST_STREAM);
        let labels = self.draw_labels(self.spec.n_test, &mut rng);
        self.sample(labels, &mut rng)
    }

    /// Test set with labels cycling through all classes.
    pub fn balanced_test_set(&self) -> Dataset {
        let mut rng = stream(self.spec.seed, BALANCED_TEST_STREAM);
        let labels = (0..self.spec.n_test)
            .map(|i| i % self.spec.num_classes)
            .collect();
        self.sample(labels, &mut rng)
    }

    pub fn test_set(&self) -> Dataset {
        if self.spec.balanced_test {
            self.balanced_test_set()
        } else {
            self.imbalanced_test_set()
        }
    }

    /// Exact class posterior `prior_k N(x; mu_k, sigma^2 I) / Z`, computed in log space.
    pub fn true_posterior(&self, x: &[f64]) -> Result<ProbDist> {
        if x.len() != self.spec.dim {
            return Err(Error::invalid(format!(
                "point has {} features, mixture has {}",
                x.len(),
                self.spec.dim
            )));
        }
        let inv_two_var = 1.0 / (2.0 * self.spec.sigma * self.spec.sigma);
        let log_joint: Vec<f64> = self
            .means
            .iter()
            .zip(self.priors.as_slice())
            .map(|(mu, &prior)| {
                let sq: f64 = mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
                prior.ln() - sq * inv_two_var
            })
            .collect();
        let max = log_joint.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let weights: Vec<f64> = log_joint.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(ProbDist::new_unchecked(
            weights.into_iter().map(|w| w / total).collect(),
        ))
    }

    /// Argmax of the exact posterior.
    pub fn bayes_predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.true_posterior(x)?.argmax())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn rng_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `(train, test)`; the test set is balanced iff `spec.balanced_test`.
pub fn generate(spec: &MixtureSpec) -> Result<(Dataset, Dataset)> {
    let mixture = Mixture::new(spec)?;
    Ok((mixture.train_set(), mixture.test_set()))
}

/// Exact posterior of `x` under `spec`'s mixture.
pub fn true_posterior(spec: &MixtureSpec, x: &[f64]) -> Result<ProbDist> {
    Mixture::new(spec)?.true_posterior(x)
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    seed: u64,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid("dimension and class count must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not fill {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "datav1 n={} d={} L={} seed={}\n",
            self.len(),
            self.dim,
            self.num_classes,
            self.seed
        );
        for (row, y) in self.rows().zip(&self.labels) {
            let _ = write!(out, "{y}");
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            location: format!("line {line}"),
            msg,
        };
        let mut lines = text.split_terminator('\n');
        let header = lines
            .next()
            .ok_or_else(|| err(1, "empty file, expected `datav1` header".into()))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some("datav1") {
            return Err(err(1, "expected `datav1` header".into()));
        }
        let mut fields = [0u64; 4];
        for (slot, name) in fields.iter_mut().zip(["n", "d", "L", "seed"]) {
            let token = tokens
                .next()
                .ok_or_else(|| err(1, format!("missing field {name}")))?;
            *slot = token
                .strip_prefix(name)
                .and_then(|t| t.strip_prefix('='))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(1, format!("expected {name}=<integer>, got {token:?}")))?;
        }
        if tokens.next().is_some() {
            return Err(err(1, "trailing header fields".into()));
        }
        let [n, dim, num_classes, seed] = fields;
        let (n, dim, num_classes) = (n as usize, dim as usize, num_classes as usize);
        if dim == 0 || num_classes == 0 {
            return Err(err(1, "d and L must be positive".into()));
        }

        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if labels.len() == n {
                return Err(err(line_no, format!("more than n={n} data rows")));
            }
            let mut parts = line.split(',');
            let y: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(line_no, "bad label".into()))?;
            if y >= num_classes {
                return Err(err(line_no, format!("label {y} out of range")));
            }
            let before = features.len();
            for part in parts {
                let v: f64 = part
                    .parse()
                    .map_err(|_| err(line_no, format!("bad feature {part:?}")))?;
                features.push(v);
            }
            if features.len() - before != dim {
                return Err(err(
                    line_no,
                    format!("expected {dim} features, found {}", features.len() - before),
                ));
            }
            labels.push(y);
        }
        if labels.len() != n {
            return Err(err(
                labels.len() + 2,
                format!("header says n={n} but found {} rows", labels.len()),
            ));
        }
        Dataset::new(features, labels, dim, num_classes, seed).map_err(|e| err(1, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MixtureSpec {
        MixtureSpec {
            num_classes: 10,
            dim: 4,
            zipf_exponent: 1.2,
            radius: 3.0,
            sigma: 1.0,
            n_train: 10_000,
            n_test: 500,
            balanced_test: true,
            seed: 17,
        }
    }

    #[test]
    fn zero_exponent_gives_uniform_counts() {
        let spec = MixtureSpec {
            zipf_exponent: 0.0,
            ..spec()
        };
        let (train, _) = generate(&spec).unwrap();
        let expected = spec.n_train as f64 / spec.num_classes as f64;
        let chi2: f64 = train
            .class_counts()
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom; 27.88 is the 0.999 quantile
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn zipf_counts_follow_expectation() {
        let spec = spec();
        let (train, _) = generate(&spec).unwrap();
        let counts = train.class_counts();
        let priors = spec.priors();
        let n = spec.n_train as f64;
        for (k, &c) in counts.iter().enumerate() {
            let p = priors.as_slice()[k];
            let mean = n * p;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - mean).abs() < 5.0 * sd,
                "class {k}: {c} vs {mean}"
            );
        }
        assert!(counts[0] > counts[9]);
        let expected: Vec<f64> = priors.as_slice().iter().map(|p| n * p).collect();
        assert!(expected.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.0.to_text(), b.0.to_text());
        assert_eq!(a.1.to_text(), b.1.to_text());
        assert_ne!(a.0.features(0), a.1.features(0));
    }

    #[test]
    fn balanced_test_has_equal_counts() {
        let spec = MixtureSpec {
            n_test: 1000,
            ..spec()
        };
        let (_, test) = generate(&spec).unwrap();
        assert!(test.class_counts().iter().all(|&c| c == 100));
    }

    #[test]
    fn posterior_symmetry_and_limit() {
        let spec = MixtureSpec {
            zipf_exponent: 0.0,
            num_classes: 3,
            ..spec()
        };
        let mixture = Mixture::new(&spec).unwrap();
        let m = mixture.means();
        let midpoint: Vec<f64> = m[0].iter().zip(&m[1]).map(|(a, b)| (a + b) / 2.0).collect();
        let p = mixture.true_posterior(&midpoint).unwrap();
        assert!((p.as_slice()[0] - p.as_slice()[1]).abs() < 1e-12);

        let sharp = Mixture::new(&MixtureSpec {
            sigma: 0.01,
            ..spec.clone()
        })
        .unwrap();
        let p = sharp.true_posterior(&sharp.means()[2].clone()).unwrap();
        assert!(p.as_slice()[2] > 1.0 - 1e-12);
    }

    #[test]
    fn posterior_matches_density_oracle() {
        let spec = spec();
        let mixture = Mixture::new(&spec).unwrap();
        let (_, test) = generate(&spec).unwrap();
        let d = spec.dim as f64;
        let var = spec.sigma * spec.sigma;
        let norm = (2.0 * std::f64::consts::PI * var).powf(-d / 2.0);
        for x in test.rows().take(50) {
            let joint: Vec<f64> = mixture
                .means()
                .iter()
                .zip(spec.priors().as_slice())
                .map(|(mu, p)| {
                    let sq: f64 = mu.iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum();
                    p * norm * (-sq / (2.0 * var)).exp()
                })
                .collect();
            let z: f64 = joint.iter().sum();
            let got = mixture.true_posterior(x).unwrap();
            for (g, j) in got.as_slice().iter().zip(&joint) {
                assert!((g - j / z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let spec = MixtureSpec {
            n_train: 50,
            ..spec()
        };
        let (train, _) = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.data");
        train.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), train);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Dataset::parse("", "x"), Err(Error::Parse { .. })));
        let text = "datav1 n=2 d=2 L=3 seed=1\n0,1.0,2.0\n";
        let e = Dataset::parse(text, "x").unwrap_err().to_string();
        assert!(e.contains("n=2"), "{e}");
        assert!(Dataset::parse("datav1 n=1 d=2 L=3 seed=1\n0,1.0\n", "x").is_err());
        assert!(Dataset::parse("datav1 n=1 d=2 L=3 seed=1\n5,1.0,2.0\n", "x").is_err());
        assert!(Dataset::parse("datav1 n=1 d=2 L=3 seed=1\n0,1.0,abc\n", "x").is_err());
        assert!(Dataset::parse("datav1 n=1 d=2 L=3 seed=1\n0,1.0,2.0\n", "x").is_ok());
    }

    #[test]
    fn validation() {
        assert!(MixtureSpec {
            sigma: 0.0,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(MixtureSpec {
            radius: -1.0,
            ..spec()
        }
        .validate()
        .is_err());
        assert_eq!(
            MixtureSpec {
                n_train: 5,
                ..spec()
            }
            .warnings()
            .len(),
            1
        );
    }
}
