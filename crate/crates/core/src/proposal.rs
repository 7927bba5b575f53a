//! Nearest-neighbour posterior surrogate and exact sampling from it.
//!
//! The likelihood is interpolated piecewise constantly over the Voronoi cells
//! of the anchor nodes and multiplied by the prior. Proposing from the prior
//! and accepting with probability `exp(ℓ_nearest − max ℓ)` therefore samples
//! the normalized surrogate exactly: the envelope is tight.
//!
//! Once the surrogate concentrates, almost every prior proposal is rejected.
//! The sampler therefore tiles the prior box and bounds the surrogate on each
//! tile by the largest log-likelihood among the anchors whose Voronoi cells
//! can reach it. A tile is picked in proportion to its bound, a point is drawn
//! uniformly inside it and accepted with probability
//! `exp(ℓ_nearest − tile bound)`. Accepted points follow the same normalized
//! surrogate; with a single tile this is plain prior rejection.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bayes::PriorBox;
use crate::nn::{squared_distance, KdTree};
use crate::rng;
use crate::scalar::Scalar;

/// Acceptance rates below this abort sampling.
pub const ACCEPTANCE_FLOOR: f64 = 1e-6;
/// Prior-equivalent proposals examined before the acceptance rate is judged.
const RATE_CHECK_AFTER: u64 = 10_000_000;
const CHUNK: usize = 4096;
/// Upper bound on the number of envelope tiles.
const MAX_TILES: usize = 4096;
/// Tiles with at most this many candidate anchors search them linearly.
const MAX_LISTED: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("surrogate needs at least one anchor")]
    NoAnchors,
    #[error("{anchors} anchors but {values} log-likelihood values")]
    Length { anchors: usize, values: usize },
    #[error("anchor {index} has dimension {found}, prior has {expected}")]
    Dimension { index: usize, expected: usize, found: usize },
    #[error("log-likelihood at anchor {index} is NaN or +inf")]
    InvalidValue { index: usize },
    #[error("every anchor has log-likelihood -inf")]
    AllZero,
    #[error(
        "acceptance rate {rate:e} after {proposals} proposals is below {floor:e}; \
         the surrogate mass is too concentrated relative to the prior box"
    )]
    AcceptanceTooLow { rate: f64, proposals: u64, floor: f64 },
}

/// `ρ_N(x) ∝ exp(ℓ_{nearest(x)} − max ℓ) · q(x)`.
#[derive(Debug, Clone)]
pub struct ProposalSurrogate<T> {
    tree: KdTree<T>,
    log_likelihoods: Vec<T>,
    max_log_likelihood: T,
    prior: PriorBox<T>,
    flat: bool,
    envelope: Envelope<T>,
}

/// Piecewise-constant upper bound of the surrogate on a regular grid of tiles.
#[derive(Debug, Clone)]
struct Envelope<T> {
    per_axis: usize,
    width: Vec<T>,
    /// Largest anchor log-likelihood that can occur in each tile.
    bound: Vec<T>,
    /// Anchors that can be nearest somewhere in the tile, ascending; empty
    /// when there are too many to list and the k-d tree is used instead.
    candidates: Vec<Vec<usize>>,
    /// Running sums of `exp(bound − max ℓ)` over the tiles.
    cumulative: Vec<f64>,
    /// Mean of `exp(bound − max ℓ)`: the acceptance rate of prior proposals
    /// relative to envelope proposals.
    mean_bound: f64,
}

impl<T: Scalar> Envelope<T> {
    fn new(anchors: &[Vec<T>], log_likelihoods: &[T], max: T, prior: &PriorBox<T>) -> Self {
        let d = prior.dimension();
        let per_axis = ((MAX_TILES as f64).powf(1.0 / d as f64).floor() as usize).max(1);
        let tiles = per_axis.pow(d as u32);
        let width: Vec<T> = prior
            .lower()
            .iter()
            .zip(prior.upper())
            .map(|(&l, &u)| (u - l) / T::from_usize_lossy(per_axis))
            .collect();
        let slack = T::one() + T::lit(1e-9);
        let mut bound = Vec::with_capacity(tiles);
        let mut candidates = Vec::with_capacity(tiles);
        let mut near = vec![T::zero(); anchors.len()];
        let mut index = vec![0usize; d];
        for _ in 0..tiles {
            let lo: Vec<T> = (0..d)
                .map(|i| prior.lower()[i] + T::from_usize_lossy(index[i]) * width[i])
                .collect();
            // Every point of the tile is within `reach` of some anchor, so only
            // anchors whose closest tile point is within `reach` can be nearest.
            let mut reach = T::infinity();
            for (a, nk) in anchors.iter().zip(near.iter_mut()) {
                let (mut dmin, mut dmax) = (T::zero(), T::zero());
                for i in 0..d {
                    let (l, u) = (lo[i], lo[i] + width[i]);
                    let below = (l - a[i]).max(T::zero());
                    let above = (a[i] - u).max(T::zero());
                    let gap = below.max(above);
                    let far = (a[i] - l).abs().max((u - a[i]).abs());
                    dmin = dmin + gap * gap;
                    dmax = dmax + far * far;
                }
                *nk = dmin;
                reach = reach.min(dmax);
            }
            let reach = reach * slack;
            let list: Vec<usize> = (0..anchors.len()).filter(|&k| near[k] <= reach).collect();
            bound.push(list.iter().map(|&k| log_likelihoods[k]).fold(T::neg_infinity(), T::max));
            candidates.push(if list.len() <= MAX_LISTED { list } else { Vec::new() });
            for i in 0..d {
                index[i] += 1;
                if index[i] < per_axis {
                    break;
                }
                index[i] = 0;
            }
        }
        let mut total = 0.0;
        let cumulative: Vec<f64> = bound
            .iter()
            .map(|&b| {
                total += (b - max).exp().to_f64_lossy();
                total
            })
            .collect();
        Self {
            per_axis,
            width,
            bound,
            candidates,
            cumulative,
            mean_bound: total / tiles as f64,
        }
    }

    /// Tile whose cumulative mass first exceeds `u · total`.
    fn pick(&self, u: f64) -> usize {
        let total = *self.cumulative.last().expect("at least one tile");
        let target = u * total;
        self.cumulative.partition_point(|&c| c <= target).min(self.cumulative.len() - 1)
    }

    /// Uniform point in tile `t`.
    fn draw_in<R: Rng + ?Sized>(&self, t: usize, prior: &PriorBox<T>, rng: &mut R, x: &mut [T]) {
        let mut rest = t;
        for (i, xi) in x.iter_mut().enumerate() {
            let cell = rest % self.per_axis;
            rest /= self.per_axis;
            let offset = T::from_usize_lossy(cell) + T::lit(rng.random::<f64>());
            *xi = (prior.lower()[i] + offset * self.width[i]).min(prior.upper()[i]);
        }
    }
}

impl<T: Scalar> ProposalSurrogate<T> {
    pub fn new(anchors: Vec<Vec<T>>, log_likelihoods: Vec<T>, prior: PriorBox<T>) -> Result<Self, ProposalError> {
        if anchors.is_empty() {
            return Err(ProposalError::NoAnchors);
        }
        if anchors.len() != log_likelihoods.len() {
            return Err(ProposalError::Length {
                anchors: anchors.len(),
                values: log_likelihoods.len(),
            });
        }
        for (i, a) in anchors.iter().enumerate() {
            if a.len() != prior.dimension() {
                return Err(ProposalError::Dimension {
                    index: i,
                    expected: prior.dimension(),
                    found: a.len(),
                });
            }
        }
        if let Some(i) = log_likelihoods.iter().position(|l| l.is_nan() || *l == T::infinity()) {
            return Err(ProposalError::InvalidValue { index: i });
        }
        let max = log_likelihoods.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Err(ProposalError::AllZero);
        }
        let flat = log_likelihoods.iter().all(|&l| l == max);
        let envelope = Envelope::new(&anchors, &log_likelihoods, max, &prior);
        Ok(Self {
            tree: KdTree::new(anchors),
            log_likelihoods,
            max_log_likelihood: max,
            prior,
            flat,
            envelope,
        })
    }

    pub fn anchors(&self) -> &[Vec<T>] {
        self.tree.points()
    }

    pub fn log_likelihoods(&self) -> &[T] {
        &self.log_likelihoods
    }

    pub fn max_log_likelihood(&self) -> T {
        self.max_log_likelihood
    }

    pub fn prior(&self) -> &PriorBox<T> {
        &self.prior
    }

    /// Nearest anchor in Euclidean distance, ties to the lowest index.
    pub fn nearest_index(&self, x: &[T]) -> usize {
        self.tree.nearest(x).0
    }

    /// Acceptance probability of a prior proposal at `x`.
    pub fn acceptance(&self, x: &[T]) -> T {
        if self.flat {
            return T::one();
        }
        (self.log_likelihoods[self.nearest_index(x)] - self.max_log_likelihood).exp()
    }

    /// `ℓ_nearest − max ℓ + log q(x)`; `−∞` outside the prior box.
    pub fn log_density(&self, x: &[T]) -> T {
        let lp = self.prior.log_density(x);
        if lp == T::neg_infinity() {
            return lp;
        }
        self.log_likelihoods[self.nearest_index(x)] - self.max_log_likelihood + lp
    }

    /// `count` independent draws from the normalized surrogate.
    ///
    /// Work is split into fixed chunks, each with its own stream derived from
    /// `seed`, so the result is identical for any thread count.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<T>>, ProposalError> {
        let chunks = count.div_ceil(CHUNK);
        let parts: Result<Vec<Vec<Vec<T>>>, ProposalError> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let n = CHUNK.min(count - c * CHUNK);
                self.sample_chunk(n, &mut rng::stream(seed, &[c as u64]))
            })
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }

    fn sample_chunk<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<T>>, ProposalError> {
        let mut out = Vec::with_capacity(n);
        let mut x = vec![T::zero(); self.prior.dimension()];
        if self.flat {
            for _ in 0..n {
                self.prior.sample_into(rng, &mut x);
                out.push(x.clone());
            }
            return Ok(out);
        }
        let env = &self.envelope;
        let mut proposals: u64 = 0;
        let check_after = (RATE_CHECK_AFTER as f64 * env.mean_bound).ceil() as u64;
        while out.len() < n {
            let t = env.pick(rng.random::<f64>());
            env.draw_in(t, &self.prior, rng, &mut x);
            proposals += 1;
            let listed = &env.candidates[t];
            let k = if listed.is_empty() {
                self.nearest_index(&x)
            } else {
                nearest_listed(self.anchors(), listed, &x)
            };
            if T::lit(rng.random::<f64>()) < (self.log_likelihoods[k] - env.bound[t]).exp() {
                out.push(x.clone());
            } else if proposals >= check_after {
                let rate = out.len() as f64 / proposals as f64 * env.mean_bound;
                if rate < ACCEPTANCE_FLOOR {
                    return Err(ProposalError::AcceptanceTooLow {
                        rate,
                        proposals: (proposals as f64 / env.mean_bound) as u64,
                        floor: ACCEPTANCE_FLOOR,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Nearest of the listed anchors, ties to the lowest index.
fn nearest_listed<T: Scalar>(anchors: &[Vec<T>], listed: &[usize], x: &[T]) -> usize {
    let mut best = (listed[0], squared_distance(&anchors[listed[0]], x));
    for &k in &listed[1..] {
        let d2 = squared_distance(&anchors[k], x);
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best.0
}

/// `count` independent prior draws, chunked like [`ProposalSurrogate::sample`].
pub fn sample_prior<T: Scalar>(prior: &PriorBox<T>, count: usize, seed: u64) -> Vec<Vec<T>> {
    let chunks = count.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(count - c * CHUNK);
            let mut r = rng::stream(seed, &[c as u64]);
            (0..n).map(|_| prior.sample(&mut r)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit1() -> PriorBox<f64> {
        PriorBox::unit(1)
    }

    #[test]
    fn nearest_index_examples() {
        let s = ProposalSurrogate::new(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0], unit1()).unwrap();
        assert_eq!(s.nearest_index(&[0.4]), 0);
        assert_eq!(s.nearest_index(&[1.0]), 1);
        assert_eq!(s.nearest_index(&[0.5]), 0);
    }

    #[test]
    fn log_density_examples() {
        let s = ProposalSurrogate::new(vec![vec![0.3]], vec![-7.0], unit1()).unwrap();
        assert_eq!(s.log_density(&[0.9]), 0.0);
        assert_eq!(s.log_density(&[1.2]), f64::NEG_INFINITY);
        let s = ProposalSurrogate::new(vec![vec![0.2], vec![0.8]], vec![-1.0, -3.0], unit1()).unwrap();
        assert_eq!(s.log_density(&[0.9]), -3.0 - (-1.0));
    }

    #[test]
    fn interpolates_at_anchors() {
        let anchors = vec![vec![0.1, 0.2], vec![0.7, 0.4], vec![0.5, 0.9]];
        let ll = vec![-0.5, -2.0, 3.0];
        let b = PriorBox::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let s = ProposalSurrogate::new(anchors.clone(), ll.clone(), b.clone()).unwrap();
        for (a, &l) in anchors.iter().zip(&ll) {
            assert_eq!(s.log_density(a) - b.log_density(a) + s.max_log_likelihood(), l);
        }
    }

    #[test]
    fn flat_surrogate_returns_prior_samples() {
        let s = ProposalSurrogate::new(vec![vec![0.2], vec![0.9]], vec![1.5, 1.5], unit1()).unwrap();
        assert_eq!(s.sample(5000, 3).unwrap(), sample_prior(&unit1(), 5000, 3));
        let single = ProposalSurrogate::new(vec![vec![0.2]], vec![-4.0], unit1()).unwrap();
        assert_eq!(single.sample(100, 9).unwrap(), sample_prior(&unit1(), 100, 9));
    }

    #[test]
    fn zero_likelihood_cell_is_never_sampled() {
        let s = ProposalSurrogate::new(vec![vec![0.25], vec![0.75]], vec![0.0, f64::NEG_INFINITY], unit1()).unwrap();
        let xs = s.sample(10_000, 1).unwrap();
        assert!(xs.iter().all(|x| x[0] < 0.5));
    }

    #[test]
    fn voronoi_cell_masses() {
        // Anchors 0.1, 0.4, 0.8 split [0,1] at 0.25 and 0.6.
        let l = [1.0f64, 0.25, 0.5];
        let widths = [0.25, 0.35, 0.4];
        let s = ProposalSurrogate::new(
            vec![vec![0.1], vec![0.4], vec![0.8]],
            l.iter().map(|v| v.ln()).collect(),
            unit1(),
        )
        .unwrap();
        let n = 100_000;
        let xs = s.sample(n, 17).unwrap();
        let total: f64 = l.iter().zip(&widths).map(|(a, b)| a * b).sum();
        let mut counts = [0usize; 3];
        for x in &xs {
            counts[s.nearest_index(x)] += 1;
        }
        for k in 0..3 {
            let p = l[k] * widths[k] / total;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let got = counts[k] as f64 / n as f64;
            assert!((got - p).abs() <= 3.0 * se, "cell {k}: {got} vs {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = ProposalSurrogate::new(vec![vec![0.2, 0.2], vec![0.8, 0.5]], vec![0.0, -1.0], PriorBox::unit(2)).unwrap();
        assert_eq!(s.sample(9000, 5).unwrap(), s.sample(9000, 5).unwrap());
        assert_ne!(s.sample(100, 5).unwrap(), s.sample(100, 6).unwrap());
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(ProposalSurrogate::<f64>::new(vec![], vec![], unit1()).is_err());
        assert!(ProposalSurrogate::new(vec![vec![0.0]], vec![f64::NAN], unit1()).is_err());
        assert!(ProposalSurrogate::new(vec![vec![0.0]], vec![f64::NEG_INFINITY], unit1()).is_err());
        assert!(ProposalSurrogate::new(vec![vec![0.0, 1.0]], vec![0.0], unit1()).is_err());
    }
}
