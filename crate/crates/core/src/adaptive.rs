//! The adaptive loop: sample the surrogate, build a nested implicit rule,
//! evaluate the model at the new nodes only, refine the surrogate.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{prior_rule_posterior_estimate, BaselineError};
use crate::basis::{BasisError, BasisFamily, MultiIndexBasis, PolynomialSpace};
use crate::bayes::{BayesError, StatisticalModel};
use crate::implicit::{construct_implicit_rule, ImplicitError};
use crate::model::{Model, ModelError};
use crate::proposal::{sample_prior, ProposalError, ProposalSurrogate};
use crate::rng;
use crate::rules::{QuadratureRule, RuleError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {required} history records, have {found}")]
    InsufficientHistory { required: usize, found: usize },
    #[error("model dimension {model} does not match prior dimension {prior}")]
    Dimension { model: usize, prior: usize },
    #[error(transparent)]
    Implicit(#[from] ImplicitError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthKind {
    /// `D_i = base + step · i`.
    Linear,
    /// `D_i = base · 2^i`.
    Exponential,
}

/// Exactness target per iteration.
///
/// `cap` bounds the number of basis functions `D_i + 1`; once reached, later
/// iterations keep the capped space and only refresh the samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub kind: GrowthKind,
    #[serde(default)]
    pub base: usize,
    #[serde(default = "one")]
    pub step: usize,
    #[serde(default)]
    pub cap: Option<usize>,
}

fn one() -> usize {
    1
}

impl GrowthSchedule {
    /// `D_i = i`.
    pub fn linear() -> Self {
        Self {
            kind: GrowthKind::Linear,
            base: 0,
            step: 1,
            cap: None,
        }
    }

    /// `D_i = 2^i`.
    pub fn exponential() -> Self {
        Self {
            kind: GrowthKind::Exponential,
            base: 1,
            step: 1,
            cap: None,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<(), AdaptiveError> {
        match self.kind {
            GrowthKind::Linear if self.step == 0 => Err(AdaptiveError::Config("linear schedule needs step >= 1".into())),
            GrowthKind::Exponential if self.base == 0 => {
                Err(AdaptiveError::Config("exponential schedule needs base >= 1".into()))
            }
            _ if self.cap == Some(0) => Err(AdaptiveError::Config("cap must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Uncapped `D_i`, saturating on overflow.
    pub fn degree(&self, i: usize) -> usize {
        match self.kind {
            GrowthKind::Linear => self.base.saturating_add(self.step.saturating_mul(i)),
            GrowthKind::Exponential => {
                let p = u32::try_from(i).ok().and_then(|e| 1usize.checked_shl(e)).unwrap_or(usize::MAX);
                self.base.saturating_mul(p)
            }
        }
    }

    /// Basis functions used at iteration `i`: `D_i + 1`, bounded by the cap.
    pub fn exactness_count(&self, i: usize) -> usize {
        let n = self.degree(i).saturating_add(1);
        self.cap.map_or(n, |c| n.min(c))
    }
}

/// Where each iteration draws its samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    /// The nearest-neighbour posterior surrogate.
    #[default]
    Surrogate,
    /// The prior; estimates then use the likelihood ratio.
    Prior,
}

/// What the recorded estimate is the posterior expectation of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// The parameters `x` (posterior mean).
    #[default]
    Parameters,
    /// The model outputs `u(x)` (posterior predictive mean).
    Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub schedule: GrowthSchedule,
    /// Samples drawn per iteration (`K + 1`).
    pub sample_count: usize,
    pub max_iterations: usize,
    /// Stop once `e_N` falls below this.
    #[serde(default)]
    pub tolerance: Option<f64>,
    pub seed: u64,
    #[serde(default = "chebyshev")]
    pub family: BasisFamily,
    #[serde(default)]
    pub proposal: ProposalMode,
    #[serde(default)]
    pub quantity: Quantity,
}

fn chebyshev() -> BasisFamily {
    BasisFamily::Chebyshev
}

impl AdaptiveConfig {
    pub fn new(schedule: GrowthSchedule, sample_count: usize, max_iterations: usize, seed: u64) -> Self {
        Self {
            schedule,
            sample_count,
            max_iterations,
            tolerance: None,
            seed,
            family: BasisFamily::Chebyshev,
            proposal: ProposalMode::Surrogate,
            quantity: Quantity::Parameters,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptiveError> {
        self.schedule.validate()?;
        if self.sample_count == 0 {
            return Err(AdaptiveError::Config("sample_count must be positive".into()));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(AdaptiveError::Config("tolerance must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// `D_i` as used, i.e. the exactness count minus one.
    pub degree: usize,
    pub node_count: usize,
    pub new_nodes: usize,
    pub evaluations: usize,
    pub estimate: Vec<T>,
    /// `‖estimate − previous estimate‖₂`; absent for the first record.
    pub consecutive_difference: Option<T>,
    pub moment_residual: T,
    pub wall_time_s: f64,
}

/// A rule, the model evaluations at its nodes and the surrogate built on them.
///
/// Nodes, outputs and log-likelihoods are aligned; every node carries a
/// model evaluation.
#[derive(Debug, Clone)]
pub struct AdaptiveState<T> {
    iteration: usize,
    rule: QuadratureRule<T>,
    outputs: Vec<Vec<T>>,
    log_likelihoods: Vec<T>,
    surrogate: ProposalSurrogate<T>,
    history: Vec<IterationRecord<T>>,
    evaluations: usize,
    seed: u64,
    halted: Option<String>,
}

impl<T: Scalar> AdaptiveState<T> {
    /// A single prior-drawn node of weight one.
    pub fn init(
        model: &dyn Model<T>,
        statistical: &StatisticalModel<T>,
        seed: u64,
    ) -> Result<Self, AdaptiveError> {
        let prior = &statistical.prior;
        if model.input_dim() != prior.dimension() {
            return Err(AdaptiveError::Dimension {
                model: model.input_dim(),
                prior: prior.dimension(),
            });
        }
        let x = prior.sample(&mut rng::stream(seed, &[0]));
        let outputs = model.evaluate_batch(std::slice::from_ref(&x))?;
        let ll = statistical.likelihood.log_likelihood(&outputs[0])?;
        // A zero-likelihood first node still anchors a flat surrogate.
        let anchor_ll = if ll == T::neg_infinity() { T::zero() } else { ll };
        let surrogate = ProposalSurrogate::new(vec![x.clone()], vec![anchor_ll], prior.clone())?;
        let rule = QuadratureRule::new(vec![x], vec![T::one()], 1, 1)?;
        Ok(Self {
            iteration: 0,
            rule,
            outputs,
            log_likelihoods: vec![ll],
            surrogate,
            history: Vec::new(),
            evaluations: 1,
            seed,
            halted: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rule(&self) -> &QuadratureRule<T> {
        &self.rule
    }

    pub fn outputs(&self) -> &[Vec<T>] {
        &self.outputs
    }

    pub fn log_likelihoods(&self) -> &[T] {
        &self.log_likelihoods
    }

    pub fn surrogate(&self) -> &ProposalSurrogate<T> {
        &self.surrogate
    }

    pub fn history(&self) -> &[IterationRecord<T>] {
        &self.history
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Why [`run_with`] stopped before `max_iterations` without converging:
    /// the samples of the last attempted step could not carry a rule of the
    /// scheduled exactness.
    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    /// Values of `quantity` at every node.
    pub fn quantity_values(&self, quantity: Quantity) -> Vec<Vec<T>> {
        match quantity {
            Quantity::Parameters => self.rule.nodes().to_vec(),
            Quantity::Outputs => self.outputs.clone(),
        }
    }

    /// Posterior expectation of `values` (aligned with the nodes). With a
    /// surrogate proposal the normalized rule is applied directly; with a
    /// prior proposal the likelihood ratio estimator is used.
    pub fn posterior_expectation(&self, values: &[Vec<T>], mode: ProposalMode) -> Result<Vec<T>, AdaptiveError> {
        Ok(match mode {
            ProposalMode::Surrogate => self.rule.apply_normalized(values)?,
            ProposalMode::Prior => prior_rule_posterior_estimate(&self.rule, values, &self.log_likelihoods)?,
        })
    }

    /// One refinement. On error `self` is untouched.
    pub fn step(
        &self,
        model: &dyn Model<T>,
        statistical: &StatisticalModel<T>,
        config: &AdaptiveConfig,
    ) -> Result<Self, AdaptiveError> {
        let started = Instant::now();
        let i = self.iteration + 1;
        let prior = &statistical.prior;
        let count = config.schedule.exactness_count(i);
        let sample_seed = rng::derive_seed(self.seed, &[i as u64]);
        let samples = match config.proposal {
            ProposalMode::Surrogate => self.surrogate.sample(config.sample_count, sample_seed)?,
            ProposalMode::Prior => sample_prior(prior, config.sample_count, sample_seed),
        };
        let (lower, upper) = bounding_box(samples.iter(), prior);
        let space =
            PolynomialSpace::mapped(MultiIndexBasis::enumerate(prior.dimension(), count), &lower, &upper)?.with_family(config.family);
        let built = construct_implicit_rule(self.rule.nodes(), &samples, &space)?;

        let previous = self.rule.len();
        let new_outputs = model.evaluate_batch(&built.rule.nodes()[previous..])?;
        let fresh = new_outputs.len();
        let new_ll = new_outputs
            .iter()
            .map(|u| statistical.likelihood.log_likelihood(u))
            .collect::<Result<Vec<T>, _>>()?;

        let mut outputs = self.outputs.clone();
        outputs.extend(new_outputs);
        let mut log_likelihoods = self.log_likelihoods.clone();
        log_likelihoods.extend(new_ll);
        let surrogate = build_surrogate(built.rule.nodes(), &log_likelihoods, prior)?;
        let total = built.rule.len();
        let rule = built.rule.with_evaluated_count(total)?;

        let mut next = Self {
            iteration: i,
            rule,
            outputs,
            log_likelihoods,
            surrogate,
            history: self.history.clone(),
            evaluations: self.evaluations + fresh,
            seed: self.seed,
            halted: None,
        };
        let estimate = next.posterior_expectation(&next.quantity_values(config.quantity), config.proposal)?;
        let consecutive_difference = self.history.last().map(|prev| difference_norm(&estimate, &prev.estimate));
        next.history.push(IterationRecord {
            iteration: i,
            degree: count - 1,
            node_count: next.rule.len(),
            new_nodes: next.rule.len() - previous,
            evaluations: next.evaluations,
            estimate,
            consecutive_difference,
            moment_residual: built.moment_residual,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        Ok(next)
    }

    /// `e_N` of the last two records.
    pub fn consecutive_difference(&self) -> Result<T, AdaptiveError> {
        consecutive_difference(&self.history)
    }
}

/// `‖e_last − e_prev‖₂` over the last two history records.
pub fn consecutive_difference<T: Scalar>(history: &[IterationRecord<T>]) -> Result<T, AdaptiveError> {
    match history {
        [.., a, b] => Ok(difference_norm(&b.estimate, &a.estimate)),
        _ => Err(AdaptiveError::InsufficientHistory {
            required: 2,
            found: history.len(),
        }),
    }
}

fn difference_norm<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>().sqrt()
}

/// Smallest box holding `points`, used to map the basis.
///
/// The span of a graded-lex prefix is invariant under per-coordinate affine
/// maps, so this changes conditioning only: samples from a concentrated
/// surrogate fill the mapped cube instead of a corner of the prior box.
/// Degenerate widths fall back to the prior's.
pub fn bounding_box<'a, T: Scalar>(
    points: impl Iterator<Item = &'a Vec<T>>,
    prior: &crate::bayes::PriorBox<T>,
) -> (Vec<T>, Vec<T>) {
    let d = prior.dimension();
    let mut lo = vec![T::infinity(); d];
    let mut hi = vec![T::neg_infinity(); d];
    for p in points {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..d {
        let width = prior.upper()[k] - prior.lower()[k];
        if !(hi[k] - lo[k] > width * T::lit(1e-9)) {
            lo[k] = prior.lower()[k];
            hi[k] = prior.upper()[k];
        }
    }
    (lo, hi)
}

/// Anchors with `−∞` log-likelihood keep a zero cell; if every anchor is
/// zero the surrogate falls back to the prior.
fn build_surrogate<T: Scalar>(
    nodes: &[Vec<T>],
    log_likelihoods: &[T],
    prior: &crate::bayes::PriorBox<T>,
) -> Result<ProposalSurrogate<T>, ProposalError> {
    if log_likelihoods.iter().all(|&l| l == T::neg_infinity()) {
        return ProposalSurrogate::new(nodes.to_vec(), vec![T::zero(); nodes.len()], prior.clone());
    }
    ProposalSurrogate::new(nodes.to_vec(), log_likelihoods.to_vec(), prior.clone())
}

/// Iterates [`AdaptiveState::step`] until `max_iterations` or `e_N < tolerance`.
///
/// `observer` sees every new state (for logging); returning an error from it
/// aborts the run.
pub fn run_with<T: Scalar>(
    model: &dyn Model<T>,
    statistical: &StatisticalModel<T>,
    config: &AdaptiveConfig,
    mut observer: impl FnMut(&AdaptiveState<T>) -> Result<(), AdaptiveError>,
) -> Result<AdaptiveState<T>, AdaptiveError> {
    config.validate()?;
    let mut state = AdaptiveState::init(model, statistical, config.seed)?;
    for _ in 0..config.max_iterations {
        state = match state.step(model, statistical, config) {
            Ok(next) => next,
            Err(AdaptiveError::Implicit(e)) if state.iteration >= 1 && exhausts_samples(&e) => {
                state.halted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        observer(&state)?;
        let converged = match (config.tolerance, state.history.last().and_then(|r| r.consecutive_difference)) {
            (Some(tol), Some(e)) => e.to_f64_lossy() < tol,
            _ => false,
        };
        if converged {
            break;
        }
    }
    Ok(state)
}

/// Rule-construction failures that mean the sample set is too small or too
/// clustered for the requested exactness, as opposed to invalid input.
fn exhausts_samples(e: &ImplicitError) -> bool {
    matches!(
        e,
        ImplicitError::InsufficientSamples { .. }
            | ImplicitError::RankDeficient { .. }
            | ImplicitError::NoCandidate
            | ImplicitError::NegativeWeight { .. }
            | ImplicitError::NullSpaceFailure { .. }
            | ImplicitError::Linalg(_)
    )
}

pub fn run<T: Scalar>(
    model: &dyn Model<T>,
    statistical: &StatisticalModel<T>,
    config: &AdaptiveConfig,
) -> Result<AdaptiveState<T>, AdaptiveError> {
    run_with(model, statistical, config, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{GaussianIid, Likelihood, PriorBox};
    use crate::model::{FnModel, Identity};
    use crate::rules::{is_nested, nesting_tolerance};

    fn beta_model() -> StatisticalModel<f64> {
        StatisticalModel {
            prior: PriorBox::unit(1),
            likelihood: Likelihood::BetaKernel { alpha: 40.0, beta: 60.0 },
        }
    }

    #[test]
    fn schedules() {
        let lin = GrowthSchedule::linear();
        assert_eq!((1..=4).map(|i| lin.degree(i)).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(lin.exactness_count(20), 21);
        let exp = GrowthSchedule::exponential();
        assert_eq!(exp.degree(0), 1);
        assert_eq!(exp.degree(10), 1024);
        let capped = GrowthSchedule {
            kind: GrowthKind::Linear,
            base: 0,
            step: 20,
            cap: Some(120),
        };
        assert_eq!((1..=7).map(|i| capped.exactness_count(i)).collect::<Vec<_>>(), vec![21, 41, 61, 81, 101, 120, 120]);
        assert!(GrowthSchedule { step: 0, ..lin }.validate().is_err());
        assert_eq!(exp.degree(200), usize::MAX);
    }

    #[test]
    fn init_is_single_node() {
        let s = AdaptiveState::init(&Identity { dimension: 1 }, &beta_model(), 3).unwrap();
        assert_eq!(s.rule().len(), 1);
        assert_eq!(s.rule().total_weight(), 1.0);
        assert_eq!(s.surrogate().acceptance(&[0.77]), 1.0);
        assert!(s.history().is_empty());
        assert!(s.consecutive_difference().is_err());
    }

    #[test]
    fn consecutive_difference_examples() {
        let rec = |e: Vec<f64>| IterationRecord {
            iteration: 0,
            degree: 0,
            node_count: 0,
            new_nodes: 0,
            evaluations: 0,
            estimate: e,
            consecutive_difference: None,
            moment_residual: 0.0,
            wall_time_s: 0.0,
        };
        assert_eq!(consecutive_difference(&[rec(vec![0.5]), rec(vec![0.5])]).unwrap(), 0.0);
        assert!((consecutive_difference(&[rec(vec![0.4]), rec(vec![0.3])]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(consecutive_difference(&[rec(vec![1.0, 0.0]), rec(vec![0.0, 0.0])]).unwrap(), 1.0);
    }

    #[test]
    fn run_is_nested_economical_and_deterministic() {
        let config = AdaptiveConfig::new(GrowthSchedule::linear(), 2000, 8, 11);
        let model = Identity { dimension: 1 };
        let stat = beta_model();
        let mut rules = vec![];
        let state = run_with(&model, &stat, &config, |s| {
            rules.push(s.rule().clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(state.history().len(), 8);
        let tol = nesting_tolerance(1.0);
        for (i, w) in rules.windows(2).enumerate() {
            assert!(is_nested(&w[0], &w[1], tol), "iteration {i}");
        }
        let mut budget = 1;
        for r in state.history() {
            assert!(r.new_nodes <= r.degree + 1);
            budget += r.degree + 1;
            assert!(r.evaluations <= budget);
            assert!(r.moment_residual <= 1e-8);
        }
        assert_eq!(state.evaluations(), state.rule().len());
        let again = run(&model, &stat, &config).unwrap();
        assert_eq!(again.history().iter().map(|r| r.estimate.clone()).collect::<Vec<_>>(),
                   state.history().iter().map(|r| r.estimate.clone()).collect::<Vec<_>>());
        assert_eq!(again.rule(), state.rule());
        let m = state.history().last().unwrap().estimate[0];
        assert!((m - 41.0 / 102.0).abs() < 0.02, "{m}");
    }

    #[test]
    fn constant_model_estimates_constant() {
        let model = FnModel::new(2, 1, |_: &[f64]| vec![3.25]);
        let stat = StatisticalModel {
            prior: PriorBox::unit(2),
            likelihood: Likelihood::GaussianIid(GaussianIid::new(vec![3.0, 3.5], 0.5).unwrap()),
        };
        for proposal in [ProposalMode::Surrogate, ProposalMode::Prior] {
            let config = AdaptiveConfig {
                quantity: Quantity::Outputs,
                proposal,
                ..AdaptiveConfig::new(GrowthSchedule::linear(), 500, 4, 2)
            };
            let s = run(&model, &stat, &config).unwrap();
            for r in s.history() {
                assert!((r.estimate[0] - 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn failed_step_leaves_state_unchanged() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let model = FnModel::new(1, 1, |x: &[f64]| {
            if calls.fetch_add(1, Ordering::SeqCst) >= 3 {
                vec![f64::NAN]
            } else {
                vec![x[0]]
            }
        });
        let stat = beta_model();
        let config = AdaptiveConfig::new(GrowthSchedule::linear(), 300, 5, 1);
        let s0 = AdaptiveState::init(&model, &stat, 1).unwrap();
        let s1 = s0.step(&model, &stat, &config).unwrap();
        assert!(matches!(s1.step(&model, &stat, &config), Err(AdaptiveError::Model(ModelError::NonFinite { .. }))));
        assert_eq!(s1.iteration(), 1);
        assert_eq!(s1.rule().len(), s1.outputs().len());
    }

    #[test]
    fn tolerance_stops_early() {
        let model = FnModel::new(1, 1, |_: &[f64]| vec![0.5]);
        let config = AdaptiveConfig {
            tolerance: Some(1e-9),
            quantity: Quantity::Outputs,
            ..AdaptiveConfig::new(GrowthSchedule::linear(), 200, 10, 1)
        };
        let s = run(&model, &beta_model(), &config).unwrap();
        assert_eq!(s.history().len(), 2);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = AdaptiveConfig {
            tolerance: Some(1e-4),
            ..AdaptiveConfig::new(GrowthSchedule::exponential().with_cap(64), 1000, 6, 9)
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AdaptiveConfig>(&text).unwrap(), c);
        let minimal: AdaptiveConfig = serde_json::from_str(
            r#"{"schedule":{"kind":"linear"},"sample_count":10,"max_iterations":2,"seed":0}"#,
        )
        .unwrap();
        assert_eq!(minimal.schedule, GrowthSchedule::linear());
        assert_eq!(minimal.family, BasisFamily::Chebyshev);
    }
}
