//! Priors, likelihoods and hyperparameter marginalization.
//!
//! Everything is computed in log space and up to additive constants: every
//! estimate downstream is self-normalized, so the evidence never matters.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::gauss_legendre;
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("invalid prior box: need lower < upper, finite, in every coordinate")]
    InvalidBox,
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
    #[error("standard deviation must be positive")]
    NonPositiveSigma,
    #[error("covariance not positive definite at A = {a}, l = {l}")]
    Covariance { a: f64, l: f64 },
    #[error("marginal likelihood is zero at every hyperparameter grid point")]
    ZeroMarginal,
    #[error("hyperparameter grid needs at least 2 points per axis")]
    GridTooSmall,
    #[error("hyperparameter interval must satisfy 0 <= low <= high (A) or low <= high (l)")]
    InvalidInterval,
}

/// Uniform prior on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorBoxFile<T>", into = "PriorBoxFile<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PriorBox<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct PriorBoxFile<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> TryFrom<PriorBoxFile<T>> for PriorBox<T> {
    type Error = BayesError;
    fn try_from(f: PriorBoxFile<T>) -> Result<Self, BayesError> {
        Self::new(f.lower, f.upper)
    }
}

impl<T: Scalar> From<PriorBox<T>> for PriorBoxFile<T> {
    fn from(b: PriorBox<T>) -> Self {
        Self {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

impl<T: Scalar> PriorBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, BayesError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(BayesError::InvalidBox);
        }
        let ok = lower.iter().zip(&upper).all(|(&l, &u)| l.is_finite() && u.is_finite() && l < u);
        if !ok {
            return Err(BayesError::InvalidBox);
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        Self::new(vec![T::zero(); d], vec![T::one(); d]).expect("unit box is valid")
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> T {
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| u - l).fold(T::one(), |a, b| a * b)
    }

    pub fn diameter(&self) -> T {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (u - l) * (u - l))
            .sum::<T>()
            .sqrt()
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dimension() && x.iter().zip(&self.lower).zip(&self.upper).all(|((&v, &l), &u)| v >= l && v <= u)
    }

    /// `−log(volume)` inside the box, `−∞` outside.
    pub fn log_density(&self, x: &[T]) -> T {
        if self.contains(x) {
            -self.volume().ln()
        } else {
            T::neg_infinity()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut x = vec![T::zero(); self.lower.len()];
        self.sample_into(rng, &mut x);
        x
    }

    /// Overwrites `x` with a uniform draw; consumes the same random numbers
    /// as [`PriorBox::sample`].
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [T]) {
        for ((xi, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = l + (u - l) * T::lit(rng.random::<f64>());
        }
    }

    /// Maps `t ∈ [0,1]^d` onto the box.
    pub fn from_unit(&self, t: &[T]) -> Vec<T> {
        t.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&l, &u))| l + (u - l) * t)
            .collect()
    }

    /// Maps a point of the box onto `[0,1]^d`.
    pub fn to_unit(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&l, &u))| (x - l) / (u - l))
            .collect()
    }
}

/// `−½ (u − z)²/σ²` summed over the data, for a scalar model output.
pub fn log_gaussian_iid<T: Scalar>(model_output: T, data: &[T], sigma: T) -> T {
    let half = T::lit(0.5);
    -half * data.iter().map(|&z| (model_output - z) * (model_output - z)).sum::<T>() / (sigma * sigma)
}

/// Independent Gaussian measurement errors with known standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianIid<T> {
    pub data: Vec<T>,
    pub sigma: T,
}

impl<T: Scalar> GaussianIid<T> {
    pub fn new(data: Vec<T>, sigma: T) -> Result<Self, BayesError> {
        if !(sigma > T::zero()) {
            return Err(BayesError::NonPositiveSigma);
        }
        if data.is_empty() {
            return Err(BayesError::Length { expected: 1, found: 0 });
        }
        Ok(Self { data, sigma })
    }

    /// A scalar output is compared with every datum; an output vector of the
    /// data's length is compared entry by entry.
    pub fn log_likelihood(&self, outputs: &[T]) -> Result<T, BayesError> {
        match outputs.len() {
            1 => Ok(log_gaussian_iid(outputs[0], &self.data, self.sigma)),
            n if n == self.data.len() => {
                let half = T::lit(0.5);
                let s2 = self.sigma * self.sigma;
                Ok(-half * outputs.iter().zip(&self.data).map(|(&u, &z)| (u - z) * (u - z)).sum::<T>() / s2)
            }
            n => Err(BayesError::Length {
                expected: self.data.len(),
                found: n,
            }),
        }
    }
}

/// `A · exp(−((s − s′)/(L·10^l))²)`.
pub fn squared_exponential_cov<T: Scalar>(s: T, s_prime: T, a: T, l: T, length_scale: T) -> T {
    let r = (s - s_prime) / (length_scale * T::lit(10.0).powf(l));
    a * (-(r * r)).exp()
}

/// Measurement noise plus a squared-exponential model-discrepancy process
/// whose amplitude `A` and log-length `l` are integrated out on a
/// Gauss–Legendre grid over their uniform hyper-priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDiscrepancy<T> {
    pub data: Vec<T>,
    pub locations: Vec<T>,
    pub sigma: T,
    pub length_scale: T,
    pub amplitude_range: (T, T),
    pub log_length_range: (T, T),
    #[serde(default)]
    pub include_logdet: bool,
    #[serde(default = "default_grid")]
    pub grid: (usize, usize),
}

fn default_grid() -> (usize, usize) {
    (12, 12)
}

impl<T: Scalar> GpDiscrepancy<T> {
    pub fn validate(&self) -> Result<(), BayesError> {
        if self.data.len() != self.locations.len() || self.data.is_empty() {
            return Err(BayesError::Length {
                expected: self.locations.len(),
                found: self.data.len(),
            });
        }
        if !(self.sigma > T::zero()) || !(self.length_scale > T::zero()) {
            return Err(BayesError::NonPositiveSigma);
        }
        let (a0, a1) = self.amplitude_range;
        let (l0, l1) = self.log_length_range;
        if !(a0 >= T::zero() && a0 <= a1 && l0 <= l1) {
            return Err(BayesError::InvalidInterval);
        }
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(BayesError::GridTooSmall);
        }
        Ok(())
    }

    /// `Σ + C(A, l)` with `Σ = σ² I`.
    pub fn covariance(&self, a: T, l: T) -> Matrix<T> {
        let n = self.locations.len();
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = squared_exponential_cov(self.locations[i], self.locations[j], a, l, self.length_scale);
            }
            k[(i, i)] = k[(i, i)] + self.sigma * self.sigma;
        }
        k
    }

    /// `−½ dᵀK⁻¹d` (and `−½ log det K` when enabled) with `d = z − u`.
    pub fn log_likelihood_at(&self, outputs: &[T], a: T, l: T) -> Result<T, BayesError> {
        if outputs.len() != self.data.len() {
            return Err(BayesError::Length {
                expected: self.data.len(),
                found: outputs.len(),
            });
        }
        let d: Vec<T> = self.data.iter().zip(outputs).map(|(&z, &u)| z - u).collect();
        let chol = Cholesky::factor(&self.covariance(a, l)).map_err(|_| BayesError::Covariance {
            a: a.to_f64_lossy(),
            l: l.to_f64_lossy(),
        })?;
        let half = T::lit(0.5);
        let mut v = -half * chol.quadratic_form(&d);
        if self.include_logdet {
            v = v - half * chol.log_det();
        }
        Ok(v)
    }

    /// Grid nodes and normalized weights along one hyperparameter axis.
    fn axis(range: (T, T), n: usize) -> Vec<(T, T)> {
        let (lo, hi) = range;
        let rule = gauss_legendre::<T>(n);
        let half = T::lit(0.5);
        rule.nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&t, &w)| (lo + (t + T::one()) * half * (hi - lo), w * half))
            .collect()
    }

    /// Log of the hyper-prior average of the likelihood over `(A, l)`.
    pub fn marginal_log_likelihood(&self, outputs: &[T]) -> Result<T, BayesError> {
        self.validate()?;
        let a_axis = Self::axis(self.amplitude_range, self.grid.0);
        let l_axis = Self::axis(self.log_length_range, self.grid.1);
        let mut terms = Vec::with_capacity(a_axis.len() * l_axis.len());
        for &(a, wa) in &a_axis {
            for &(l, wl) in &l_axis {
                terms.push((wa * wl).ln() + self.log_likelihood_at(outputs, a, l)?);
            }
        }
        let lse = log_sum_exp(&terms);
        if lse == T::neg_infinity() {
            return Err(BayesError::ZeroMarginal);
        }
        Ok(lse)
    }
}

/// `log Σ exp(x_i)` without overflow; `−∞` for an empty or all-`−∞` input.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// How model outputs are turned into a log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood<T> {
    GaussianIid(GaussianIid<T>),
    GpDiscrepancy(GpDiscrepancy<T>),
    /// `α ln u + β ln(1 − u)` for a scalar output `u ∈ [0, 1]`.
    BetaKernel { alpha: T, beta: T },
}

impl<T: Scalar> Likelihood<T> {
    pub fn log_likelihood(&self, outputs: &[T]) -> Result<T, BayesError> {
        match self {
            Self::GaussianIid(g) => g.log_likelihood(outputs),
            Self::GpDiscrepancy(g) => g.marginal_log_likelihood(outputs),
            Self::BetaKernel { alpha, beta } => {
                if outputs.len() != 1 {
                    return Err(BayesError::Length {
                        expected: 1,
                        found: outputs.len(),
                    });
                }
                let u = outputs[0];
                if !(u >= T::zero() && u <= T::one()) {
                    return Ok(T::neg_infinity());
                }
                let term = |c: T, v: T| if c == T::zero() { T::zero() } else { c * v.ln() };
                Ok(term(*alpha, u) + term(*beta, T::one() - u))
            }
        }
    }
}

/// Prior box plus likelihood: everything needed for `log ρ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct StatisticalModel<T> {
    pub prior: PriorBox<T>,
    pub likelihood: Likelihood<T>,
}

impl<T: Scalar> StatisticalModel<T> {
    /// Log-likelihood plus log prior density; `−∞` outside the prior box.
    pub fn log_posterior_unnormalized(&self, outputs: &[T], x: &[T]) -> Result<T, BayesError> {
        let lp = self.prior.log_density(x);
        if lp == T::neg_infinity() {
            return Ok(lp);
        }
        Ok(self.likelihood.log_likelihood(outputs)? + lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gp(a: (f64, f64), l: (f64, f64)) -> GpDiscrepancy<f64> {
        GpDiscrepancy {
            data: vec![0.1, -0.2, 0.05, 0.3],
            locations: vec![0.0, 0.01, 0.05, 0.2],
            sigma: 0.01,
            length_scale: 0.01,
            amplitude_range: a,
            log_length_range: l,
            include_logdet: false,
            grid: (12, 12),
        }
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(log_gaussian_iid(1.5, &[1.5, 1.5], 0.3), 0.0);
        assert_eq!(log_gaussian_iid(2.0, &[0.0], 1.0), -2.0);
        assert_eq!(log_gaussian_iid(2.0, &[0.0], 2.0), -0.5);
        let g = GaussianIid::new(vec![1.0, 2.0], 1.0).unwrap();
        assert_eq!(g.log_likelihood(&[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(g.log_likelihood(&[0.0]).unwrap(), -2.5);
        assert!(g.log_likelihood(&[0.0; 3]).is_err());
        assert!(GaussianIid::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(squared_exponential_cov(0.3, 0.3, 2.0, 0.5, 0.01), 2.0);
        assert_eq!(squared_exponential_cov(0.0, 1.0, 0.0, 0.5, 0.01), 0.0);
        let l = 0.25;
        let dist = 0.01 * 10f64.powf(l);
        assert_abs_diff_eq!(squared_exponential_cov(0.0, dist, 3.0, l, 0.01), 3.0 / std::f64::consts::E, epsilon = 1e-15);
    }

    #[test]
    fn gp_likelihood_examples() {
        let mut g = gp((0.0, 0.0), (0.0, 1.0));
        let u = vec![0.0, 0.1, 0.1, 0.1];
        let iid = GaussianIid::new(g.data.clone(), g.sigma).unwrap().log_likelihood(&u).unwrap();
        assert_abs_diff_eq!(g.log_likelihood_at(&u, 0.0, 0.3).unwrap(), iid, epsilon = 1e-9 * iid.abs());
        assert_abs_diff_eq!(g.marginal_log_likelihood(&u).unwrap(), iid, epsilon = 1e-9 * iid.abs());
        assert_eq!(g.log_likelihood_at(&g.data.clone(), 0.005, 0.5).unwrap(), 0.0);

        // Two coincident locations: K = [[2,1],[1,2]], d = (1,0).
        g = GpDiscrepancy {
            data: vec![1.0, 0.0],
            locations: vec![0.5, 0.5],
            sigma: 1.0,
            length_scale: 1.0,
            amplitude_range: (1.0, 1.0),
            log_length_range: (0.0, 0.0),
            include_logdet: false,
            grid: (2, 2),
        };
        assert_abs_diff_eq!(g.log_likelihood_at(&[0.0, 0.0], 1.0, 0.0).unwrap(), -1.0 / 3.0, epsilon = 1e-15);
        g.include_logdet = true;
        assert_abs_diff_eq!(
            g.log_likelihood_at(&[0.0, 0.0], 1.0, 0.0).unwrap(),
            -1.0 / 3.0 - 0.5 * 3f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn marginal_of_constant_integrand_is_that_constant() {
        // Zero misfit gives log-likelihood 0 at every grid point.
        let g = gp((0.0, 0.01), (0.0, 1.0));
        let m = g.marginal_log_likelihood(&g.data.clone()).unwrap();
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn marginal_grid_refinement_converges() {
        let mut g = gp((0.0, 0.01), (0.0, 1.0));
        let u = vec![0.09, -0.18, 0.07, 0.28];
        g.grid = (8, 8);
        let coarse = g.marginal_log_likelihood(&u).unwrap();
        g.grid = (16, 16);
        let fine = g.marginal_log_likelihood(&u).unwrap();
        assert!((coarse - fine).abs() < 1e-3);
    }

    #[test]
    fn covariance_eigenvalues_bounded_below_by_noise() {
        let g = gp((0.0, 0.01), (0.0, 1.0));
        for &a in &[0.0, 0.004, 0.01] {
            for &l in &[0.0, 0.5, 1.0] {
                let mut k = g.covariance(a, l);
                for i in 0..k.rows() {
                    k[(i, i)] = k[(i, i)] - (g.sigma * g.sigma - 1e-10);
                }
                assert!(Cholesky::factor(&k).is_ok(), "A={a}, l={l}");
                let kk = g.covariance(a, l);
                for i in 0..kk.rows() {
                    for j in 0..kk.rows() {
                        assert_eq!(kk[(i, j)], kk[(j, i)]);
                    }
                }
            }
        }
    }

    #[test]
    fn prior_box_and_posterior() {
        let b = PriorBox::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(b.log_density(&[1.0, 0.0]), -(4f64.ln()), epsilon = 1e-15);
        assert_eq!(b.log_density(&[3.0, 0.0]), f64::NEG_INFINITY);
        assert!(PriorBox::new(vec![1.0], vec![1.0]).is_err());
        let model = StatisticalModel {
            prior: b,
            likelihood: Likelihood::GaussianIid(GaussianIid::new(vec![0.5], 1.0).unwrap()),
        };
        assert_eq!(model.log_posterior_unnormalized(&[0.5], &[5.0, 0.0]).unwrap(), f64::NEG_INFINITY);
        let p1 = model.log_posterior_unnormalized(&[0.5], &[1.0, 0.0]).unwrap();
        let p2 = model.log_posterior_unnormalized(&[1.5], &[0.2, 0.3]).unwrap();
        assert_abs_diff_eq!(p1 - p2, 0.5, epsilon = 1e-15);
        assert!(p1 >= p2);
    }

    #[test]
    fn beta_kernel() {
        let l = Likelihood::BetaKernel { alpha: 40.0, beta: 60.0 };
        assert_abs_diff_eq!(l.log_likelihood(&[0.4]).unwrap(), 40.0 * 0.4f64.ln() + 60.0 * 0.6f64.ln(), epsilon = 1e-12);
        assert_eq!(l.log_likelihood(&[0.0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(l.log_likelihood(&[1.5]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn serde_round_trip_validates_box() {
        let b = PriorBox::new(vec![0.0], vec![1.0]).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<PriorBox<f64>>(&s).unwrap(), b);
        assert!(serde_json::from_str::<PriorBox<f64>>(r#"{"lower":[1.0],"upper":[0.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn marginal_is_monotone_under_domination(shift in 0.0f64..0.05, scale in 0.0f64..1.0) {
            // Scaling the misfit toward zero makes every grid term larger.
            let g = gp((0.0, 0.01), (0.0, 1.0));
            let far: Vec<f64> = g.data.iter().map(|z| z + shift + 0.01).collect();
            let near: Vec<f64> = g.data.iter().map(|z| z + scale * (shift + 0.01)).collect();
            prop_assert!(g.marginal_log_likelihood(&near).unwrap() >= g.marginal_log_likelihood(&far).unwrap() - 1e-12);
        }

        #[test]
        fn log_sum_exp_shift(xs in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-10);
        }
    }
}
