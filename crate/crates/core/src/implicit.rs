//! Positive-weight node reduction: the implicit quadrature rule.
//!
//! Starting from the rule that puts weight `1/(K+1)` on each sample and zero on
//! every retained node, nodes are eliminated one at a time by moving along a
//! null vector of the Vandermonde matrix. The step length is the largest one
//! that keeps every weight non-negative, so one weight reaches zero exactly
//! while all moments stay untouched. After `(N+K+2) − (D+1)` eliminations at
//! most `D+1` columns carry weight, and only those drawn from the samples are
//! new nodes.
//!
//! Two routes are provided:
//!
//! * [`construct_implicit_rule`] keeps a square basis of `D+1` columns with a
//!   factorized inverse and brings the remaining columns in one by one. The
//!   null vector of the basis plus one entering column is unique, and updating
//!   the factorization costs `O(D²)` per elimination, so `10⁵` samples are
//!   routine.
//! * [`construct_implicit_rule_reference`] forms the full null-space basis and
//!   reduces it pivot by pivot. It is cubic in the sample count and meant for
//!   small instances and cross-checks.

use thiserror::Error;

use crate::basis::{PolynomialSpace, SpaceEvaluator};
use crate::linalg::{dot, norm2, null_space_basis, null_vector, LinalgError, Lu, Matrix};
use crate::rules::{nesting_tolerance, QuadratureRule, RuleError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ImplicitError {
    #[error("no samples given")]
    EmptySamples,
    #[error("point {index} has dimension {found}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{found} samples cannot determine {required} moments; need more than {required}")]
    InsufficientSamples { found: usize, required: usize },
    #[error("nodes span only {rank} of the {required} basis functions")]
    RankDeficient { rank: usize, required: usize },
    #[error("null vector has no nonzero entry on an active column")]
    NoCandidate,
    #[error("weight at column {index} became {value:e}, below the clamping slack")]
    NegativeWeight { index: usize, value: f64 },
    #[error("moment residual {residual:e} exceeds tolerance {tolerance:e} after retrying")]
    NullSpaceFailure { residual: f64, tolerance: f64 },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Sample means of every basis function; entry 0 is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments<T> {
    values: Vec<T>,
}

impl<T: Scalar> SampleMoments<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_dimensions<T>(points: &[Vec<T>], d: usize, offset: usize) -> Result<(), ImplicitError> {
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(ImplicitError::Dimension {
                index: offset + i,
                expected: d,
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// `μ_j = (1/(K+1)) Σ_k φ_j(y_k)` for every basis function of `space`.
pub fn sample_moments<T: Scalar>(
    space: &PolynomialSpace<T>,
    samples: &[Vec<T>],
) -> Result<SampleMoments<T>, ImplicitError> {
    if samples.is_empty() {
        return Err(ImplicitError::EmptySamples);
    }
    check_dimensions(samples, space.dimension(), 0)?;
    let mut sums = vec![T::zero(); space.len()];
    let mut ev = space.evaluator();
    for y in samples {
        for (s, &v) in sums.iter_mut().zip(ev.eval(y)) {
            *s = *s + v;
        }
    }
    let n = T::from_usize_lossy(samples.len());
    Ok(SampleMoments {
        values: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// Weighted node list being reduced, with the retained nodes first.
///
/// `weights` holds the current weights `w − c`, where `c` is the accumulated
/// null-space combination; [`ReductionState::accumulated`] recovers `c`.
#[derive(Debug, Clone)]
pub struct ReductionState<T> {
    nodes: Vec<Vec<T>>,
    initial: Vec<T>,
    weights: Vec<T>,
    active: Vec<bool>,
    protect_count: usize,
    eliminations: usize,
}

impl<T: Scalar> ReductionState<T> {
    pub fn nodes(&self) -> &[Vec<T>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn initial_weights(&self) -> &[T] {
        &self.initial
    }

    /// The running null-space combination `c` with `weights = initial − c`.
    pub fn accumulated(&self) -> Vec<T> {
        self.initial.iter().zip(&self.weights).map(|(&a, &b)| a - b).collect()
    }

    pub fn is_active(&self, column: usize) -> bool {
        self.active[column]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Number of leading (retained) columns, `N+1`.
    pub fn protect_count(&self) -> usize {
        self.protect_count
    }

    pub fn eliminations(&self) -> usize {
        self.eliminations
    }

    /// Null vector of the `(D+1) × (D+2)` submatrix formed by the active
    /// columns with the largest weights (ties toward lower index), padded with
    /// zeros to the full column count.
    pub fn submatrix_null_vector(&self, space: &PolynomialSpace<T>) -> Result<Vec<T>, ImplicitError> {
        let m = space.len();
        let mut cols: Vec<usize> = (0..self.nodes.len()).filter(|&k| self.active[k]).collect();
        if cols.len() < m + 1 {
            return Err(ImplicitError::NoCandidate);
        }
        cols.sort_by(|&a, &b| {
            self.weights[b]
                .partial_cmp(&self.weights[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        cols.truncate(m + 1);
        cols.sort_unstable();
        let points: Vec<Vec<T>> = cols.iter().map(|&k| self.nodes[k].clone()).collect();
        let sub = space.vandermonde(&points).map_err(|_| ImplicitError::EmptySamples)?;
        let v = null_vector(&sub)?;
        let mut full = vec![T::zero(); self.nodes.len()];
        for (&k, &x) in cols.iter().zip(&v) {
            full[k] = x;
        }
        Ok(full)
    }

    /// Moves the weights along `null_vec` until one active weight hits zero.
    ///
    /// The step is chosen by [`select_step`]; the pivot column becomes inactive
    /// and every vector in `pending` is reduced so that it vanishes there.
    pub fn elimination_step(
        &mut self,
        null_vec: &[T],
        pending: &mut [Vec<T>],
    ) -> Result<StepChoice<T>, ImplicitError> {
        let candidates: Vec<(usize, T, T)> = (0..self.nodes.len())
            .filter(|&k| self.active[k] && null_vec[k] != T::zero())
            .map(|k| (k, self.weights[k], null_vec[k]))
            .collect();
        let choice = select_step(&candidates, self.protect_count)?;
        apply_step(&mut self.weights, &candidates, &choice)?;
        let k0 = choice.pivot;
        self.active[k0] = false;
        self.eliminations += 1;
        let p = null_vec[k0];
        for c in pending.iter_mut() {
            let f = c[k0] / p;
            if f != T::zero() {
                for (ci, &vi) in c.iter_mut().zip(null_vec) {
                    *ci = *ci - f * vi;
                }
            }
            c[k0] = T::zero();
        }
        Ok(choice)
    }

    /// Assembles the output rule: every retained node, then each sample column
    /// with positive weight.
    pub fn to_rule(&self, exactness_count: usize) -> Result<QuadratureRule<T>, ImplicitError> {
        assemble_rule(&self.nodes, &self.weights, self.protect_count, exactness_count)
    }
}

fn assemble_rule<T: Scalar>(
    nodes: &[Vec<T>],
    weights: &[T],
    protect: usize,
    exactness_count: usize,
) -> Result<QuadratureRule<T>, ImplicitError> {
    let mut out_nodes = Vec::new();
    let mut out_weights = Vec::new();
    for (k, (x, &w)) in nodes.iter().zip(weights).enumerate() {
        if k < protect || w > T::zero() {
            out_nodes.push(x.clone());
            out_weights.push(w);
        }
    }
    Ok(QuadratureRule::new(out_nodes, out_weights, exactness_count, protect)?)
}

/// The rule `(0,…,0, 1/(K+1),…,1/(K+1))` on retained nodes followed by samples.
///
/// Samples that coincide (within the node-identity tolerance) with a retained
/// node or an earlier sample are merged into it, and their weights add up.
/// Merging keeps the weighted node set, and hence every moment, unchanged.
pub fn extend_rule<T: Scalar>(
    retained: &[Vec<T>],
    samples: &[Vec<T>],
) -> Result<ReductionState<T>, ImplicitError> {
    if samples.is_empty() {
        return Err(ImplicitError::EmptySamples);
    }
    let d = samples[0].len();
    check_dimensions(retained, d, 0)?;
    check_dimensions(samples, d, retained.len())?;
    let n_ret = retained.len();
    let all: Vec<&Vec<T>> = retained.iter().chain(samples).collect();
    let tol = nesting_tolerance(bounding_diameter(&all));
    let rep = merge_map(&all, n_ret, tol);

    let share = T::one() / T::from_usize_lossy(samples.len());
    let mut slot = vec![usize::MAX; all.len()];
    let mut nodes: Vec<Vec<T>> = retained.to_vec();
    let mut initial = vec![T::zero(); n_ret];
    for (i, s) in slot.iter_mut().enumerate().take(n_ret) {
        *s = i;
    }
    for i in n_ret..all.len() {
        let r = rep[i];
        if slot[r] == usize::MAX {
            slot[r] = nodes.len();
            nodes.push(all[r].clone());
            initial.push(T::zero());
        }
        initial[slot[r]] = initial[slot[r]] + share;
    }
    let n = nodes.len();
    Ok(ReductionState {
        nodes,
        weights: initial.clone(),
        initial,
        active: vec![true; n],
        protect_count: n_ret,
        eliminations: 0,
    })
}

fn bounding_diameter<T: Scalar>(points: &[&Vec<T>]) -> T {
    let d = points[0].len();
    let mut sq = T::zero();
    for i in 0..d {
        let (lo, hi) = points
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), p| (lo.min(p[i]), hi.max(p[i])));
        sq = sq + (hi - lo) * (hi - lo);
    }
    sq.sqrt()
}

/// Representative index for every point. Samples map onto a matching retained
/// node or the earliest matching sample; retained nodes map to themselves.
fn merge_map<T: Scalar>(points: &[&Vec<T>], n_ret: usize, tol: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .partial_cmp(&points[b][0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rep: Vec<usize> = (0..points.len()).collect();
    for (pos, &i) in order.iter().enumerate() {
        if i < n_ret {
            continue;
        }
        let mut best = i;
        for &j in order[..pos].iter().rev() {
            if points[i][0] - points[j][0] > tol {
                break;
            }
            let close = points[i].iter().zip(points[j]).all(|(&a, &b)| (a - b).abs() <= tol);
            if close && rep[j] < best {
                best = rep[j];
            }
        }
        rep[i] = best;
    }
    // A later sample may match an earlier-sorted one whose own representative
    // was fixed first; resolve chains.
    for i in n_ret..points.len() {
        let mut r = rep[i];
        while rep[r] != r {
            r = rep[r];
        }
        rep[i] = r;
    }
    rep
}

/// Outcome of the step-length selection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepChoice<T> {
    /// Step length; weights move by `−alpha · v`.
    pub alpha: T,
    /// Column removed by this step.
    pub pivot: usize,
    /// Every column whose weight is set to exactly zero, pivot included.
    pub zeroed: Vec<usize>,
}

fn entry_cutoff<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
}

/// Chooses between the two admissible step lengths for null vector `v`.
///
/// `candidates` lists `(column, weight, v_column)`. With ratios `w_k / v_k`,
/// `α_max` is the smallest ratio over `v_k > 0` and `α_min` the largest over
/// `v_k < 0`; moving by either keeps every weight non-negative and zeroes the
/// columns attaining it. Preference order: an endpoint that zeroes a column at
/// or beyond `protect_count` (a sample rather than a retained node), then the
/// one zeroing more columns, then `α_max`. The pivot is the lowest zeroed
/// sample column if there is one, otherwise the lowest zeroed column.
/// Entries below `10⁻¹²·max|v|` are treated as zero.
pub fn select_step<T: Scalar>(
    candidates: &[(usize, T, T)],
    protect_count: usize,
) -> Result<StepChoice<T>, ImplicitError> {
    let vmax = candidates.iter().fold(T::zero(), |m, &(_, _, v)| m.max(v.abs()));
    if !(vmax > T::zero()) {
        return Err(ImplicitError::NoCandidate);
    }
    let cut = vmax * entry_cutoff::<T>();
    let mut hi: Option<T> = None;
    let mut lo: Option<T> = None;
    for &(_, w, v) in candidates {
        if v.abs() <= cut {
            continue;
        }
        let r = w / v;
        if v > T::zero() {
            hi = Some(hi.map_or(r, |h| h.min(r)));
        } else {
            lo = Some(lo.map_or(r, |l| l.max(r)));
        }
    }
    let tie = T::epsilon() * T::lit(8.0);
    let zero_set = |target: T, positive: bool| -> Vec<usize> {
        let mut set: Vec<usize> = candidates
            .iter()
            .filter(|&&(_, _, v)| v.abs() > cut && (v > T::zero()) == positive)
            .filter(|&&(_, w, v)| (w / v - target).abs() <= tie * target.abs())
            .map(|&(k, _, _)| k)
            .collect();
        set.sort_unstable();
        set
    };
    let mut options: Vec<(T, Vec<usize>, bool)> = Vec::with_capacity(2);
    if let Some(h) = hi {
        options.push((h, zero_set(h, true), true));
    }
    if let Some(l) = lo {
        options.push((l, zero_set(l, false), false));
    }
    let key = |(_, set, is_max): &(T, Vec<usize>, bool)| {
        (set.iter().any(|&k| k >= protect_count), set.len(), *is_max)
    };
    let (alpha, zeroed, _) = options
        .into_iter()
        .max_by_key(key)
        .ok_or(ImplicitError::NoCandidate)?;
    let pivot = zeroed
        .iter()
        .copied()
        .find(|&k| k >= protect_count)
        .unwrap_or(zeroed[0]);
    Ok(StepChoice { alpha, pivot, zeroed })
}

fn apply_step<T: Scalar>(
    weights: &mut [T],
    candidates: &[(usize, T, T)],
    choice: &StepChoice<T>,
) -> Result<(), ImplicitError> {
    for &(k, w, v) in candidates {
        weights[k] = w - choice.alpha * v;
    }
    for &k in &choice.zeroed {
        weights[k] = T::zero();
    }
    let slack = T::negative_weight_slack();
    for &(k, _, _) in candidates {
        if weights[k] < T::zero() {
            if weights[k] < -slack {
                return Err(ImplicitError::NegativeWeight {
                    index: k,
                    value: weights[k].to_f64_lossy(),
                });
            }
            weights[k] = T::zero();
        }
    }
    Ok(())
}

/// Result of a construction, with diagnostics.
#[derive(Debug, Clone)]
pub struct ImplicitRule<T> {
    /// Retained nodes in their original order, then the new sample nodes.
    pub rule: QuadratureRule<T>,
    /// Number of nodes taken from the samples.
    pub new_nodes: usize,
    /// Elimination steps performed.
    pub eliminations: usize,
    /// `‖V w − μ‖₂ / ‖μ‖₂` of the returned rule.
    pub moment_residual: T,
    pub moments: SampleMoments<T>,
}

/// Tuning knobs for [`construct_implicit_rule_with`].
#[derive(Debug, Clone, Copy)]
pub struct ImplicitOptions<T> {
    /// Accepted relative moment residual.
    pub tol_exact: T,
    /// Basis swaps between refactorizations; `None` uses `D+1`.
    pub refactor_interval: Option<usize>,
}

impl<T: Scalar> Default for ImplicitOptions<T> {
    fn default() -> Self {
        Self {
            tol_exact: T::tol_exact(),
            refactor_interval: None,
        }
    }
}

/// Builds the positive rule matching the sample moments of `space`, keeping
/// every `retained` node (all assumed to carry model evaluations).
pub fn construct_implicit_rule<T: Scalar>(
    retained: &[Vec<T>],
    samples: &[Vec<T>],
    space: &PolynomialSpace<T>,
) -> Result<ImplicitRule<T>, ImplicitError> {
    construct_implicit_rule_with(retained, samples, space, &ImplicitOptions::default())
}

pub fn construct_implicit_rule_with<T: Scalar>(
    retained: &[Vec<T>],
    samples: &[Vec<T>],
    space: &PolynomialSpace<T>,
    options: &ImplicitOptions<T>,
) -> Result<ImplicitRule<T>, ImplicitError> {
    let moments = sample_moments(space, samples)?;
    let state = extend_rule(retained, samples)?;
    let m = space.len();
    let distinct = state.nodes.len() - state.protect_count;
    if distinct <= m && samples.len() <= m {
        return Err(ImplicitError::InsufficientSamples {
            found: samples.len(),
            required: m,
        });
    }
    check_dimensions(retained, space.dimension(), 0)?;
    let whitening = Whitening::from_samples(space, samples);
    let first_interval = options.refactor_interval.unwrap_or(m).max(1);
    let mut last_err = None;
    for interval in [first_interval, 1] {
        match basis_exchange(&state, space, &whitening, &moments, interval) {
            Ok((weights, residual)) if residual <= options.tol_exact => {
                let rule = assemble_rule(&state.nodes, &weights, state.protect_count, m)?;
                let new_nodes = rule.len() - state.protect_count;
                return Ok(ImplicitRule {
                    rule,
                    new_nodes,
                    eliminations: state.nodes.len() - m,
                    moment_residual: residual,
                    moments,
                });
            }
            Ok((_, residual)) => {
                last_err = Some(ImplicitError::NullSpaceFailure {
                    residual: residual.to_f64_lossy(),
                    tolerance: options.tol_exact.to_f64_lossy(),
                })
            }
            Err(e @ ImplicitError::RankDeficient { .. }) => return Err(e),
            Err(e) => last_err = Some(e),
        }
        if interval == 1 {
            break;
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Relative residual `‖Σ_k w_k φ(x_k) − μ‖ / ‖μ‖` over the columns in `support`.
fn moment_residual<T: Scalar>(
    space: &PolynomialSpace<T>,
    nodes: &[Vec<T>],
    weights: &[T],
    support: impl Iterator<Item = usize>,
    moments: &[T],
) -> T {
    let mut acc = vec![T::zero(); moments.len()];
    let mut ev = space.evaluator();
    for k in support {
        if weights[k] != T::zero() {
            for (a, &p) in acc.iter_mut().zip(ev.eval(&nodes[k])) {
                *a = *a + weights[k] * p;
            }
        }
    }
    let num = acc
        .iter()
        .zip(moments)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt();
    let den = moments.iter().map(|&b| b * b).sum::<T>().sqrt();
    num / den
}

/// Square basis `B` with `B⁻¹ = E_k⁻¹ ⋯ E_1⁻¹ (LU)⁻¹`, one eta factor per swap.
struct BasisTracker<T> {
    cols: Vec<usize>,
    lu: Lu<T>,
    etas: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> BasisTracker<T> {
    fn factor(cols: Vec<usize>, ev: &mut WhiteEvaluator<'_, T>, nodes: &[Vec<T>]) -> Result<Self, ImplicitError> {
        let lu = factor_columns(&cols, ev, nodes)?;
        Ok(Self {
            cols,
            lu,
            etas: Vec::new(),
        })
    }

    fn solve(&self, a: &[T]) -> Vec<T> {
        let mut y = self.lu.solve(a);
        for (r, x) in &self.etas {
            let yr = y[*r] / x[*r];
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = *yi - xi * yr;
            }
            y[*r] = yr;
        }
        y
    }

    /// Replaces basis position `r` by column `entering`, where `x = B⁻¹ a_entering`.
    fn swap(&mut self, r: usize, entering: usize, x: Vec<T>) {
        self.cols[r] = entering;
        self.etas.push((r, x));
    }

    fn refactor(&mut self, ev: &mut WhiteEvaluator<'_, T>, nodes: &[Vec<T>]) -> Result<(), ImplicitError> {
        self.lu = factor_columns(&self.cols, ev, nodes)?;
        self.etas.clear();
        Ok(())
    }
}

fn factor_columns<T: Scalar>(
    cols: &[usize],
    ev: &mut WhiteEvaluator<'_, T>,
    nodes: &[Vec<T>],
) -> Result<Lu<T>, ImplicitError> {
    let columns: Vec<Vec<T>> = cols.iter().map(|&k| ev.unit(&nodes[k]).to_vec()).collect();
    Ok(Lu::factor(&Matrix::from_columns(&columns)?)?)
}

/// Upper-triangular `R` from a QR factorization of the sample Vandermonde
/// matrix (rows are samples, scaled by `1/√rows`). The functions `R⁻ᵀ φ`
/// span the same space as `φ` and are orthonormal in the sample inner
/// product, so square bases drawn from the samples stay well conditioned
/// even when the samples occupy a small corner of the mapped box.
struct Whitening<T> {
    m: usize,
    /// `Rᵀ`, row-major.
    rt: Vec<T>,
}

impl<T: Scalar> Whitening<T> {
    /// Uses at most this many evenly strided samples.
    const MAX_ROWS: usize = 4096;

    fn from_samples(space: &PolynomialSpace<T>, samples: &[Vec<T>]) -> Self {
        let m = space.len();
        let rows = samples.len().min(Self::MAX_ROWS.max(8 * m));
        let mut ev = space.evaluator();
        let scale = T::one() / T::from_usize_lossy(rows.max(1)).sqrt();
        let mut cols = vec![vec![T::zero(); rows]; m];
        for i in 0..rows {
            let k = i * samples.len() / rows;
            for (j, &v) in ev.eval(&samples[k]).iter().enumerate() {
                cols[j][i] = v * scale;
            }
        }
        let mut r = vec![T::zero(); m * m];
        let mut q: Vec<Vec<T>> = Vec::with_capacity(m);
        for (j, mut v) in cols.into_iter().enumerate() {
            let original = norm2(&v);
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let h = dot(qi, &v);
                    r[i * m + j] = r[i * m + j] + h;
                    for (vk, &qk) in v.iter_mut().zip(qi) {
                        *vk = *vk - h * qk;
                    }
                }
            }
            let rest = norm2(&v);
            // A direction the samples do not resolve keeps a diagonal of the
            // column's own size rather than amplifying rounding noise.
            let floor = original.max(T::one()) * T::epsilon().sqrt();
            let d = if rest > floor { rest } else { original.max(T::one()) };
            r[j * m + j] = d;
            q.push(v.into_iter().map(|x| x / d).collect());
        }
        let mut rt = vec![T::zero(); m * m];
        for i in 0..m {
            for j in i..m {
                rt[j * m + i] = r[i * m + j];
            }
        }
        Self { m, rt }
    }

    /// `R⁻ᵀ b`, by forward substitution.
    fn apply_into(&self, b: &[T], out: &mut [T]) {
        let m = self.m;
        for j in 0..m {
            let row = &self.rt[j * m..j * m + j];
            out[j] = (b[j] - dot(row, &out[..j])) / self.rt[j * m + j];
        }
    }

    fn apply(&self, b: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.m];
        self.apply_into(b, &mut out);
        out
    }

    fn evaluator<'a>(&'a self, space: &'a PolynomialSpace<T>) -> WhiteEvaluator<'a, T> {
        WhiteEvaluator {
            inner: space.evaluator(),
            whitening: self,
            out: vec![T::zero(); self.m],
            last_norm: T::zero(),
        }
    }
}

struct WhiteEvaluator<'a, T> {
    inner: SpaceEvaluator<'a, T>,
    whitening: &'a Whitening<T>,
    out: Vec<T>,
    last_norm: T,
}

impl<T: Scalar> WhiteEvaluator<'_, T> {
    fn eval(&mut self, x: &[T]) -> &[T] {
        let phi = self.inner.eval(x);
        self.whitening.apply_into(phi, &mut self.out);
        &self.out
    }

    /// The whitened column scaled to unit norm; its original norm is left in
    /// `last_norm`.
    fn unit(&mut self, x: &[T]) -> &[T] {
        self.eval(x);
        self.last_norm = norm2(&self.out);
        let inv = T::one() / self.last_norm;
        for v in self.out.iter_mut() {
            *v = *v * inv;
        }
        &self.out
    }
}

/// Greedy column-pivoted Gram–Schmidt: `m` well-separated columns, taken from
/// the sample columns first (they start with positive weight).
fn initial_basis<T: Scalar>(
    state: &ReductionState<T>,
    ev: &mut WhiteEvaluator<'_, T>,
    m: usize,
) -> Result<Vec<usize>, ImplicitError> {
    let n = state.nodes.len();
    let p = state.protect_count;
    let order: Vec<usize> = (p..n).chain(0..p).collect();
    let accept = T::lit(1e-9).max(T::epsilon() * T::lit(1e3));
    let mut q: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    let chunk = 4 * m;
    let mut next = 0;
    while chosen.len() < m && next < order.len() {
        let end = (next + chunk).min(order.len());
        let mut pool: Vec<(usize, Vec<T>, T)> = order[next..end]
            .iter()
            .map(|&k| {
                let mut c = ev.eval(&state.nodes[k]).to_vec();
                let norm = crate::linalg::norm2(&c);
                for _ in 0..2 {
                    for qv in &q {
                        let h = crate::linalg::dot(qv, &c);
                        for (ci, &qi) in c.iter_mut().zip(qv) {
                            *ci = *ci - h * qi;
                        }
                    }
                }
                (k, c, norm)
            })
            .collect();
        next = end;
        while chosen.len() < m {
            let best = pool
                .iter()
                .enumerate()
                .map(|(i, (_, c, norm))| (i, crate::linalg::norm2(c) / *norm))
                .fold(None, |acc: Option<(usize, T)>, (i, r)| match acc {
                    Some((_, br)) if br >= r => acc,
                    _ => Some((i, r)),
                });
            let Some((i, ratio)) = best else { break };
            if !(ratio > accept) {
                break;
            }
            let (k, c, _) = pool.swap_remove(i);
            let nc = crate::linalg::norm2(&c);
            let qv: Vec<T> = c.into_iter().map(|x| x / nc).collect();
            for (_, c, _) in pool.iter_mut() {
                let h = crate::linalg::dot(&qv, c);
                for (ci, &qi) in c.iter_mut().zip(&qv) {
                    *ci = *ci - h * qi;
                }
            }
            q.push(qv);
            chosen.push(k);
        }
    }
    if chosen.len() < m {
        return Err(ImplicitError::RankDeficient {
            rank: chosen.len(),
            required: m,
        });
    }
    Ok(chosen)
}

/// Runs every elimination with a factorized square basis. Returns final
/// weights over the extended columns and their moment residual.
///
/// Columns are whitened and scaled to unit norm, and the weights are carried
/// as `w_k · ‖column_k‖`. Positivity is unaffected, while "negligible weight"
/// now means negligible contribution to the moments; a node far from the
/// samples has huge basis values and a correspondingly tiny true weight.
fn basis_exchange<T: Scalar>(
    state: &ReductionState<T>,
    space: &PolynomialSpace<T>,
    whitening: &Whitening<T>,
    moments: &SampleMoments<T>,
    interval: usize,
) -> Result<(Vec<T>, T), ImplicitError> {
    let nodes = &state.nodes;
    let n = nodes.len();
    let protect = state.protect_count;
    let mut ev = whitening.evaluator(space);
    let mut scale = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let mut tracker = BasisTracker::factor(initial_basis(state, &mut ev, space.len())?, &mut ev, nodes)?;
    let mut in_basis = vec![false; n];
    for &k in &tracker.cols {
        in_basis[k] = true;
        scale[k] = norm2(ev.eval(&nodes[k]));
        weights[k] = state.initial[k] * scale[k];
    }
    let mut candidates: Vec<(usize, T, T)> = Vec::with_capacity(tracker.cols.len() + 1);
    for e in 0..n {
        if in_basis[e] {
            continue;
        }
        ev.unit(&nodes[e]);
        // A column that left the basis earlier comes back with weight zero.
        if scale[e] == T::zero() {
            scale[e] = ev.last_norm;
            weights[e] = state.initial[e] * scale[e];
        }
        let x = tracker.solve(&ev.out);
        // Rounding leaves basic weights that should be zero at ~1e-17; read
        // as exact zeros they give clean degenerate steps instead of steps
        // pivoting on a tiny entry of x.
        let wmax = tracker.cols.iter().fold(weights[e], |m, &k| m.max(weights[k]));
        let floor = wmax * entry_cutoff::<T>();
        for &k in &tracker.cols {
            if weights[k] <= floor {
                weights[k] = T::zero();
            }
        }
        candidates.clear();
        candidates.extend(tracker.cols.iter().zip(&x).map(|(&k, &xi)| (k, weights[k], -xi)));
        candidates.push((e, weights[e], T::one()));
        let choice = select_step(&candidates, protect)?;
        apply_step(&mut weights, &candidates, &choice)?;
        if choice.zeroed.contains(&e) {
            continue;
        }
        // Any zeroed basic column may leave; the largest |x| entry keeps the
        // updated basis best conditioned.
        let (r, leaving) = tracker
            .cols
            .iter()
            .enumerate()
            .filter(|(_, k)| choice.zeroed.contains(k))
            .max_by(|a, b| x[a.0].abs().partial_cmp(&x[b.0].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(r, &k)| (r, k))
            .expect("a zeroed column is basic");
        in_basis[leaving] = false;
        in_basis[e] = true;
        tracker.swap(r, e, x);
        if tracker.etas.len() >= interval {
            tracker.refactor(&mut ev, nodes)?;
        }
    }

    let unscale = |scaled: &dyn Fn(usize, usize) -> T| {
        let mut w = vec![T::zero(); n];
        for (r, &k) in tracker.cols.iter().enumerate() {
            w[k] = scaled(r, k) / scale[k];
        }
        w
    };
    let mu = moments.values();
    let tracked_weights = unscale(&|_, k| weights[k]);
    let tracked = moment_residual(space, nodes, &tracked_weights, tracker.cols.iter().copied(), mu);
    if let Ok(lu) = factor_columns(&tracker.cols, &mut ev, nodes) {
        let target = whitening.apply(mu);
        let columns: Vec<Vec<T>> = tracker.cols.iter().map(|&k| ev.unit(&nodes[k]).to_vec()).collect();
        let mut polished = lu.solve(&target);
        for _ in 0..2 {
            let mut r = target.clone();
            for (c, &v) in columns.iter().zip(&polished) {
                for (ri, &ci) in r.iter_mut().zip(c) {
                    *ri = *ri - v * ci;
                }
            }
            for (p, d) in polished.iter_mut().zip(lu.solve(&r)) {
                *p = *p + d;
            }
        }
        let slack = T::negative_weight_slack();
        let wmax = polished.iter().fold(T::zero(), |m, &w| m.max(w));
        if polished.iter().all(|&w| w >= -slack * wmax && w.is_finite()) {
            let candidate = unscale(&|r, _| polished[r].max(T::zero()));
            let res = moment_residual(space, nodes, &candidate, tracker.cols.iter().copied(), mu);
            if res <= tracked {
                return Ok((candidate, res));
            }
        }
    }
    Ok((tracked_weights, tracked))
}

/// The same construction through the full null space and pivot-by-pivot
/// Gaussian reduction of the pending null vectors. Cubic cost; intended for
/// small instances.
pub fn construct_implicit_rule_reference<T: Scalar>(
    retained: &[Vec<T>],
    samples: &[Vec<T>],
    space: &PolynomialSpace<T>,
) -> Result<ImplicitRule<T>, ImplicitError> {
    let moments = sample_moments(space, samples)?;
    let mut state = extend_rule(retained, samples)?;
    check_dimensions(retained, space.dimension(), 0)?;
    let m = space.len();
    if samples.len() <= m {
        return Err(ImplicitError::InsufficientSamples {
            found: samples.len(),
            required: m,
        });
    }
    let v = space.vandermonde(&state.nodes).map_err(|_| ImplicitError::EmptySamples)?;
    let mut pending = null_space_basis(&v);
    let rank = state.nodes.len() - pending.len();
    if rank < m {
        return Err(ImplicitError::RankDeficient { rank, required: m });
    }
    while !pending.is_empty() {
        let c = pending.remove(0);
        state.elimination_step(&c, &mut pending)?;
    }
    let residual = moment_residual(space, &state.nodes, &state.weights, 0..state.nodes.len(), moments.values());
    if residual > T::tol_exact() {
        return Err(ImplicitError::NullSpaceFailure {
            residual: residual.to_f64_lossy(),
            tolerance: T::tol_exact().to_f64_lossy(),
        });
    }
    let rule = state.to_rule(m)?;
    let new_nodes = rule.len() - state.protect_count;
    Ok(ImplicitRule {
        rule,
        new_nodes,
        eliminations: state.eliminations,
        moment_residual: residual,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisFamily, MultiIndexBasis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(d: usize, count: usize) -> PolynomialSpace<f64> {
        PolynomialSpace::raw(MultiIndexBasis::enumerate(d, count))
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn sample_moment_examples() {
        let s = space(1, 1);
        assert_eq!(sample_moments(&s, &[vec![0.3], vec![9.0]]).unwrap().values(), &[1.0]);
        let s = space(1, 2);
        assert_eq!(sample_moments(&s, &[vec![0.0], vec![1.0]]).unwrap().values(), &[1.0, 0.5]);
        let s = space(1, 3);
        assert_eq!(sample_moments(&s, &[vec![-1.0], vec![1.0]]).unwrap().values(), &[1.0, 0.0, 1.0]);
        assert!(matches!(sample_moments::<f64>(&s, &[]), Err(ImplicitError::EmptySamples)));
    }

    #[test]
    fn extend_rule_examples() {
        let st = extend_rule::<f64>(&[], &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(st.weights(), &[0.25; 4]);
        let st = extend_rule(&[vec![5.0], vec![6.0]], &[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(st.weights(), &[0.0, 0.0, third, third, third]);
        assert_eq!(st.protect_count(), 2);
        assert!((st.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn duplicates_are_merged_with_summed_weight() {
        let st = extend_rule(&[vec![1.0]], &[vec![1.0], vec![2.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(st.nodes(), &[vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(st.weights(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn step_selection_example() {
        let c = select_step(&[(0, 0.5, 1.0), (1, 0.5, -1.0)], 0).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.zeroed, vec![0]);
        let mut st = extend_rule::<f64>(&[], &[vec![0.0], vec![1.0]]).unwrap();
        st.elimination_step(&[1.0, -1.0], &mut []).unwrap();
        assert_eq!(st.weights(), &[0.0, 1.0]);
        assert_eq!(st.accumulated(), vec![0.5, -0.5]);

        // α_min zeroes column 1 when that is the only sample column.
        let c = select_step(&[(0, 0.5, 1.0), (1, 0.5, -1.0)], 1).unwrap();
        assert_eq!(c.alpha, -0.5);
        assert_eq!(c.pivot, 1);
        assert!(select_step::<f64>(&[(0, 1.0, 0.0)], 0).is_err());
    }

    #[test]
    fn degree_zero_keeps_one_sample() {
        let r = construct_implicit_rule::<f64>(&[], &[vec![0.2], vec![0.4], vec![0.9]], &space(1, 1)).unwrap();
        assert_eq!(r.rule.len(), 1);
        assert!((r.rule.weights()[0] - 1.0).abs() < 1e-15);
    }

    /// Every subset of at most `m` samples whose square (or overdetermined)
    /// Vandermonde system has a non-negative solution reproducing `mu`.
    fn feasible_subsets(samples: &[f64], m: usize, mu: &[f64]) -> Vec<(Vec<usize>, Vec<f64>)> {
        let n = samples.len();
        let mut out = Vec::new();
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            if idx.len() != m {
                continue;
            }
            let mut a = vec![vec![0.0; m]; m];
            for (c, &i) in idx.iter().enumerate() {
                for (j, row) in a.iter_mut().enumerate() {
                    row[c] = samples[i].powi(j as i32);
                }
            }
            let Ok(lu) = Lu::factor(&crate::linalg::Matrix::from_rows(&a).unwrap()) else { continue };
            let w = lu.solve(mu);
            if w.iter().all(|&x| x >= -1e-12) {
                out.push((idx, w));
            }
        }
        out
    }

    #[test]
    fn two_point_oracle_for_four_samples() {
        let samples = [0.0, 1.0, 2.0, 3.0];
        let pts: Vec<Vec<f64>> = samples.iter().map(|&x| vec![x]).collect();
        let s = space(1, 2);
        let r = construct_implicit_rule::<f64>(&[], &pts, &s).unwrap();
        assert!(r.rule.len() <= 2);
        let mean: f64 = r.rule.nodes().iter().zip(r.rule.weights()).map(|(x, w)| x[0] * w).sum();
        assert!((mean - 1.5).abs() < 1e-14);
        assert!(!feasible_subsets(&samples, 2, &[1.0, 1.5]).is_empty());
    }

    #[test]
    fn small_instances_agree_with_subset_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let k = rng.random_range(2..=8);
            let m = rng.random_range(1..=3usize).min(k - 1);
            let samples: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let pts: Vec<Vec<f64>> = samples.iter().map(|&x| vec![x]).collect();
            let s = space(1, m);
            let mu: Vec<f64> = (0..m).map(|j| samples.iter().map(|x| x.powi(j as i32)).sum::<f64>() / k as f64).collect();
            let feasible = feasible_subsets(&samples, m, &mu);
            assert!(!feasible.is_empty(), "trial {trial}: oracle finds no feasible subset");
            for build in [construct_implicit_rule::<f64>, construct_implicit_rule_reference::<f64>] {
                let r = build(&[], &pts, &s).unwrap();
                assert!(r.rule.len() <= m);
                for (j, &target) in mu.iter().enumerate() {
                    let got: f64 = r.rule.nodes().iter().zip(r.rule.weights()).map(|(x, w)| w * x[0].powi(j as i32)).sum();
                    assert!((got - target).abs() <= 1e-12, "trial {trial}: moment {j}");
                }
                assert!(r.rule.nodes().iter().all(|x| samples.contains(&x[0])));
            }
        }
    }

    #[test]
    fn matches_21_moments_of_2000_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = uniform(&mut rng, 2001, 2);
        let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(2, 21), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let r = construct_implicit_rule(&[], &pts, &s).unwrap();
        assert!(r.new_nodes <= 21);
        // Compare against direct sample means of raw monomials.
        let raw = MultiIndexBasis::enumerate(2, 21);
        for mi in raw.indices() {
            let direct: f64 = pts.iter().map(|p| crate::basis::evaluate_monomial(mi, p).unwrap()).sum::<f64>() / 2001.0;
            let got: f64 = r
                .rule
                .nodes()
                .iter()
                .zip(r.rule.weights())
                .map(|(p, w)| w * crate::basis::evaluate_monomial(mi, p).unwrap())
                .sum();
            assert!((got - direct).abs() <= 1e-8 * direct.abs(), "{mi:?}: {got} vs {direct}");
        }
    }

    #[test]
    fn retained_nodes_survive_and_count_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(2, 10), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let first = construct_implicit_rule(&[], &uniform(&mut rng, 500, 2), &s).unwrap();
        let retained = first.rule.nodes().to_vec();
        let s2 = PolynomialSpace::mapped(MultiIndexBasis::enumerate(2, 15), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let second = construct_implicit_rule(&retained, &uniform(&mut rng, 800, 2), &s2).unwrap();
        assert_eq!(&second.rule.nodes()[..retained.len()], &retained[..]);
        assert!(second.new_nodes <= 15);
        assert_eq!(second.rule.evaluated_count(), retained.len());
        assert_eq!(second.eliminations, retained.len() + 800 - 15);
    }

    #[test]
    fn reference_route_agrees_on_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(2, 6), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let retained = uniform(&mut rng, 3, 2);
        let samples = uniform(&mut rng, 40, 2);
        let a = construct_implicit_rule(&retained, &samples, &s).unwrap();
        let b = construct_implicit_rule_reference(&retained, &samples, &s).unwrap();
        assert!(a.moment_residual < 1e-12 && b.moment_residual < 1e-12);
        assert_eq!(a.eliminations, b.eliminations);
        assert!(b.new_nodes <= 6);
    }

    #[test]
    fn submatrix_route_preserves_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = space(1, 4);
        let samples = uniform(&mut rng, 20, 1);
        let mu = sample_moments(&s, &samples).unwrap();
        let mut st = extend_rule(&[], &samples).unwrap();
        while st.active_count() > s.len() {
            let v = st.submatrix_null_vector(&s).unwrap();
            let sub = s.vandermonde(st.nodes()).unwrap();
            assert!(crate::linalg::norm2(&sub.mul_vec(&v)) < 1e-12);
            st.elimination_step(&v, &mut []).unwrap();
            assert!(st.weights().iter().all(|&w| w >= 0.0));
            let r = moment_residual(&s, st.nodes(), st.weights(), 0..st.nodes().len(), mu.values());
            assert!(r < 1e-12);
        }
        assert_eq!(st.eliminations(), 16);
    }

    #[test]
    fn high_degree_univariate_with_chebyshev_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(1, 56), &[0.0], &[1.0])
            .unwrap()
            .with_family(BasisFamily::Chebyshev);
        let r = construct_implicit_rule(&[], &uniform(&mut rng, 2800, 1), &s).unwrap();
        assert!(r.moment_residual < 1e-10);
        assert!(r.new_nodes <= 56);
    }

    #[test]
    fn insufficient_and_degenerate_inputs() {
        let s = space(1, 3);
        assert!(matches!(
            construct_implicit_rule::<f64>(&[], &[vec![0.0], vec![1.0]], &s),
            Err(ImplicitError::InsufficientSamples { .. })
        ));
        let same = vec![vec![0.5]; 10];
        assert!(matches!(
            construct_implicit_rule::<f64>(&[], &same, &s),
            Err(ImplicitError::RankDeficient { .. }) | Err(ImplicitError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn single_precision_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f32>> = (0..300).map(|_| vec![rng.random::<f32>(), rng.random::<f32>()]).collect();
        let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(2, 6), &[0.0f32, 0.0], &[1.0, 1.0]).unwrap();
        let r = construct_implicit_rule(&[], &pts, &s).unwrap();
        assert!(r.rule.weights().iter().all(|&w| w >= 0.0));
        assert!(r.moment_residual <= f32::tol_exact());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn construction_invariants(seed in 0u64..10_000, d in 1usize..4, count in 1usize..31, n_ret in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lower = vec![0.0; d];
            let upper = vec![1.0; d];
            let s = PolynomialSpace::mapped(MultiIndexBasis::enumerate(d, count), &lower, &upper)
                .unwrap()
                .with_family(BasisFamily::Chebyshev);
            let retained = uniform(&mut rng, n_ret, d);
            let samples = uniform(&mut rng, 10 * count + 5, d);
            let r = construct_implicit_rule(&retained, &samples, &s).unwrap();
            prop_assert!(r.moment_residual <= 1e-8);
            prop_assert!(r.rule.weights().iter().all(|&w| w >= 0.0));
            prop_assert!(r.new_nodes <= count);
            prop_assert_eq!(&r.rule.nodes()[..n_ret], &retained[..]);
        }
    }
}
