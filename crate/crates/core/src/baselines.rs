//! Reference integrators: univariate rules, tensor and sparse grids, and the
//! self-normalized ratio estimators used with prior-based rules.

use thiserror::Error;

use crate::bayes::PriorBox;
use crate::rules::{QuadratureRule, RuleError};
use crate::scalar::Scalar;

/// Largest node count a grid construction accepts.
pub const MAX_GRID_NODES: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("grid would have {requested} nodes, more than the limit of {limit}")]
    TooManyNodes { requested: u128, limit: usize },
    #[error("rule needs at least one point per dimension")]
    EmptyCount,
    #[error("expected {expected} entries, found {found}")]
    Length { expected: usize, found: usize },
    #[error("no values given")]
    Empty,
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Nodes and weights on `[-1, 1]`, nodes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> UnivariateRule<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ w_k f(x_k)`.
    pub fn integrate(&self, f: impl Fn(T) -> T) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Clenshaw–Curtis rule with `n` points: the Chebyshev extrema, or the
/// midpoint when `n = 1`. Exact up to degree `n − 1` (degree `n` for odd `n`).
pub fn clenshaw_curtis<T: Scalar>(n: usize) -> UnivariateRule<T> {
    assert!(n >= 1, "Clenshaw-Curtis rule needs at least one point");
    if n == 1 {
        return UnivariateRule {
            nodes: vec![T::zero()],
            weights: vec![T::lit(2.0)],
        };
    }
    let big_n = n - 1;
    let pi = std::f64::consts::PI;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        // Reduced fraction, so equal angles from different n round identically.
        let g = gcd(k, big_n);
        let theta = pi * (k / g) as f64 / (big_n / g) as f64;
        let mut s = 0.0;
        for j in 1..=big_n / 2 {
            let b = if 2 * j == big_n { 1.0 } else { 2.0 };
            s += b / (4.0 * (j * j) as f64 - 1.0) * (2.0 * j as f64 * theta).cos();
        }
        let c = if k == 0 || k == big_n { 1.0 } else { 2.0 };
        // Ascending order: x_k = −cos θ_k. Snap the centre to exactly zero.
        let x = if 2 * k == big_n { 0.0 } else { -theta.cos() };
        nodes.push(T::lit(x));
        weights.push(T::lit(c / big_n as f64 * (1.0 - s)));
    }
    UnivariateRule { nodes, weights }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Gauss–Legendre rule with `n` points (Newton iteration on `P_n`).
pub fn gauss_legendre<T: Scalar>(n: usize) -> UnivariateRule<T> {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let pi = std::f64::consts::PI;
    for i in 0..n.div_ceil(2) {
        let mut x = (pi * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    UnivariateRule {
        nodes: nodes.into_iter().map(T::lit).collect(),
        weights: weights.into_iter().map(T::lit).collect(),
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Flat list of tensor-product nodes and weight products, mapped to `prior`.
fn tensor_terms<T: Scalar>(rules: &[UnivariateRule<T>], prior: &PriorBox<T>) -> (Vec<Vec<T>>, Vec<T>) {
    let d = rules.len();
    let two = T::lit(2.0);
    let total: usize = rules.iter().map(UnivariateRule::len).product();
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut x = Vec::with_capacity(d);
        let mut w = T::one();
        for i in 0..d {
            let (lo, hi) = (prior.lower()[i], prior.upper()[i]);
            let t = rules[i].nodes[idx[i]];
            x.push(lo + (t + T::one()) * (hi - lo) / two);
            w = w * rules[i].weights[idx[i]] / two;
        }
        nodes.push(x);
        weights.push(w);
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < rules[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
    (nodes, weights)
}

fn guard(count: u128) -> Result<(), BaselineError> {
    if count > MAX_GRID_NODES as u128 {
        return Err(BaselineError::TooManyNodes {
            requested: count,
            limit: MAX_GRID_NODES,
        });
    }
    Ok(())
}

/// Tensor-product Clenshaw–Curtis rule on `prior` with `counts[i]` points in
/// dimension `i`, weights summing to one.
pub fn tensor_grid<T: Scalar>(counts: &[usize], prior: &PriorBox<T>) -> Result<QuadratureRule<T>, BaselineError> {
    if counts.len() != prior.dimension() {
        return Err(BaselineError::Length {
            expected: prior.dimension(),
            found: counts.len(),
        });
    }
    if counts.contains(&0) {
        return Err(BaselineError::EmptyCount);
    }
    guard(counts.iter().map(|&c| c as u128).product())?;
    let rules: Vec<UnivariateRule<T>> = counts.iter().map(|&n| clenshaw_curtis(n)).collect();
    let (nodes, weights) = tensor_terms(&rules, prior);
    let exact = counts.iter().copied().min().unwrap_or(1);
    Ok(QuadratureRule::new(nodes, weights, exact, 0)?)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Visits every level vector with entries ≥ 0 and sum in `[lo, hi]`.
fn level_vectors(d: usize, lo: usize, hi: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(prefix: &mut Vec<usize>, d: usize, lo: usize, hi: usize, sum: usize, f: &mut impl FnMut(&[usize])) {
        if prefix.len() == d {
            if sum >= lo {
                f(prefix);
            }
            return;
        }
        for l in 0..=hi - sum {
            prefix.push(l);
            rec(prefix, d, lo, hi, sum + l, f);
            prefix.pop();
        }
    }
    rec(&mut Vec::with_capacity(d), d, lo, hi, 0, f);
}

/// Smolyak combination of Clenshaw–Curtis rules with `ℓ + 1` points at level
/// `ℓ`, mapped to `prior` with weights summing to one.
///
/// Weights can be negative; the rule is flagged as signed. Coinciding nodes of
/// different tensor terms are merged.
pub fn smolyak<T: Scalar>(level: usize, prior: &PriorBox<T>) -> Result<QuadratureRule<T>, BaselineError> {
    let d = prior.dimension();
    let lo = (level + 1).saturating_sub(d);
    let mut total: u128 = 0;
    level_vectors(d, lo, level, &mut |l| total += l.iter().map(|&x| x as u128 + 1).product::<u128>());
    guard(total)?;

    let mut merged: std::collections::BTreeMap<Vec<u64>, (Vec<T>, T)> = std::collections::BTreeMap::new();
    level_vectors(d, lo, level, &mut |l| {
        let norm: usize = l.iter().sum();
        let k = level - norm;
        let coef = T::from_u128(binomial(d - 1, k)).expect("binomial fits");
        let coef = if k % 2 == 1 { -coef } else { coef };
        let rules: Vec<UnivariateRule<T>> = l.iter().map(|&li| clenshaw_curtis(li + 1)).collect();
        let (nodes, weights) = tensor_terms(&rules, prior);
        for (x, w) in nodes.into_iter().zip(weights) {
            let key: Vec<u64> = x.iter().map(|v| v.to_f64_lossy().to_bits()).collect();
            let entry = merged.entry(key).or_insert((x, T::zero()));
            entry.1 = entry.1 + coef * w;
        }
    });
    let (nodes, weights): (Vec<Vec<T>>, Vec<T>) = merged.into_values().filter(|(_, w)| *w != T::zero()).unzip();
    Ok(QuadratureRule::signed(nodes, weights, level + 1)?)
}

/// Shifted likelihood factors `exp(ℓ_k − max ℓ)`.
fn likelihood_factors<T: Scalar>(log_likelihoods: &[T]) -> Vec<T> {
    let max = log_likelihoods.iter().copied().fold(T::neg_infinity(), T::max);
    log_likelihoods.iter().map(|&l| (l - max).exp()).collect()
}

/// Self-normalized ratio `Σ w_k L_k f_k / Σ w_k L_k` with `L_k = exp(ℓ_k − max ℓ)`.
///
/// This turns a rule for the prior into a posterior-expectation estimate
/// without knowing the evidence. Signed rules are accepted.
pub fn prior_rule_posterior_estimate<T: Scalar>(
    rule: &QuadratureRule<T>,
    values: &[Vec<T>],
    log_likelihoods: &[T],
) -> Result<Vec<T>, BaselineError> {
    if values.len() != rule.len() || log_likelihoods.len() != rule.len() {
        return Err(BaselineError::Length {
            expected: rule.len(),
            found: values.len().min(log_likelihoods.len()),
        });
    }
    ratio_estimate(rule.weights(), values, log_likelihoods)
}

/// The same ratio over equally weighted prior samples (Monte Carlo).
pub fn monte_carlo_posterior_mean<T: Scalar>(values: &[Vec<T>], log_likelihoods: &[T]) -> Result<Vec<T>, BaselineError> {
    if values.len() != log_likelihoods.len() {
        return Err(BaselineError::Length {
            expected: values.len(),
            found: log_likelihoods.len(),
        });
    }
    let w = vec![T::one(); values.len()];
    ratio_estimate(&w, values, log_likelihoods)
}

fn ratio_estimate<T: Scalar>(weights: &[T], values: &[Vec<T>], log_likelihoods: &[T]) -> Result<Vec<T>, BaselineError> {
    if values.is_empty() {
        return Err(BaselineError::Empty);
    }
    let l = likelihood_factors(log_likelihoods);
    let mut num = vec![T::zero(); values[0].len()];
    let mut den = T::zero();
    for ((f, &w), &lk) in values.iter().zip(weights).zip(&l) {
        let c = w * lk;
        den = den + c;
        for (n, &fi) in num.iter_mut().zip(f) {
            *n = *n + c * fi;
        }
    }
    Ok(num.into_iter().map(|n| n / den).collect())
}
