//! Seeded sampling, stable softmax primitives and the finite-difference
//! gradient checker that every trainable objective is validated against.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A reproducible random stream.
///
/// Backed by ChaCha8 keyed from a 64-bit seed. The full state is the seed plus
/// the 128-bit word position, so a stream can be serialized and resumed exactly.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serialized position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for worker `index`. Depends only on `(seed, index)`, never
    /// on how much of the parent has been consumed.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(derive_seed(self.seed, index))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = RngStream::new(state.seed);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on `lo..=hi`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Mixes a parent seed and a worker index into a child seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// `mean + stddev * eps` with `eps ~ N(0, I)`.
pub fn sample_gaussian(rng: &mut RngStream, mean: &[f64], stddev: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != stddev.len() {
        return Err(Error::dim(format!(
            "mean has length {} but stddev has length {}",
            mean.len(),
            stddev.len()
        )));
    }
    if let Some(s) = stddev.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::domain(format!("stddev must be non-negative, got {s}")));
    }
    Ok(mean
        .iter()
        .zip(stddev)
        .map(|(m, s)| m + s * rng.standard_normal())
        .collect())
}

/// Draws a class index with probability `probs[i]`.
pub fn sample_categorical(rng: &mut RngStream, probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::domain("empty probability vector"));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::domain(format!("negative probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
    }
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    Ok(last_positive)
}

/// Log-probabilities of a softmax, computed with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

// Central differences at eps = 1e-5 carry about 1e-11 of roundoff per unit of
// loss, so gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `loss` against central
/// differences at every coordinate of `params`.
///
/// `loss` returns `(value, gradient)`; only the value is used at perturbed points.
pub fn grad_check<F>(name: &str, loss: F, params: &[f64], eps: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(name, loss, params, &coords, eps)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(name: &str, mut loss: F, params: &[f64], coords: &[usize], eps: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = loss(params);
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("{name}: loss is {value}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(format!(
            "{name}: gradient has length {} for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = GradReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let mut theta = params.to_vec();
    for (pos, &i) in coords.iter().enumerate() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let (plus, _) = loss(&theta);
        theta[i] = orig - eps;
        let (minus, _) = loss(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("{name}: non-finite loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if pos == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stddev_is_deterministic() {
        let mut rng = RngStream::new(1);
        assert_eq!(
            sample_gaussian(&mut rng, &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(sample_gaussian(&mut rng, &[5.0], &[0.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(42);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&mut rng, &[0.0], &[1.0]).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_length_mismatch() {
        let mut rng = RngStream::new(0);
        assert!(matches!(
            sample_gaussian(&mut rng, &[0.0, 1.0], &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn categorical_point_masses() {
        let mut rng = RngStream::new(3);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&mut rng, &[1.0, 0.0, 0.0]).unwrap(), 0);
            assert_eq!(sample_categorical(&mut rng, &[0.0, 0.0, 1.0]).unwrap(), 2);
        }
    }

    #[test]
    fn categorical_fair_coin() {
        let mut rng = RngStream::new(9);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&mut rng, &[0.5, 0.5]).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.49..=0.51).contains(&freq), "freq {freq}");
    }

    #[test]
    fn categorical_rejects_bad_input() {
        let mut rng = RngStream::new(0);
        assert!(matches!(
            sample_categorical(&mut rng, &[1.5, -0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            sample_categorical(&mut rng, &[0.3, 0.3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = std::f64::consts::LN_2;
        for v in [log_softmax(&[0.0, 0.0]), log_softmax(&[1000.0, 1000.0])] {
            assert!((v[0] + ln2).abs() < 1e-12 && (v[1] + ln2).abs() < 1e-12);
        }
        let v = log_softmax(&[0.0, 3f64.ln()]);
        assert!((v[0] + 4f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = RngStream::new(77);
        for _ in 0..13 {
            a.standard_normal();
        }
        let mut b = RngStream::from_state(a.state());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn children_are_independent_of_parent_position() {
        let a = RngStream::new(5);
        let mut b = RngStream::new(5);
        b.next_u64();
        assert_eq!(a.child(3).next_u64(), b.child(3).next_u64());
        assert_ne!(a.child(3).next_u64(), a.child(4).next_u64());
    }

    #[test]
    fn grad_check_quadratic_and_sine() {
        let r = grad_check("sq", |p| (p[0] * p[0], vec![2.0 * p[0]]), &[3.0], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let r = grad_check("sin", |p| (p[0].sin(), vec![p[0].cos()]), &[1.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let r = grad_check("bad", |p| (p[0] * p[0], vec![4.0 * p[0]]), &[3.0], 1e-4).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_non_finite() {
        let r = grad_check("nan", |_| (f64::NAN, vec![0.0]), &[1.0], 1e-4);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
