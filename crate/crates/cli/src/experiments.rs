//! Experiment drivers. Each repeat owns a random stream derived from the run
//! seed and its labels, so results do not depend on scheduling.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use quadcal::adaptive::{run_with, AdaptiveConfig, AdaptiveState, ProposalMode, Quantity};
use quadcal::baselines::{prior_rule_posterior_estimate, smolyak, tensor_grid, MAX_GRID_NODES};
use quadcal::basis::MultiIndexBasis;
use quadcal::bayes::{GaussianIid, GpDiscrepancy, Likelihood, PriorBox, StatisticalModel};
use quadcal::genz::{gaussian_noise, generate_data, random_genz, GenzFamily, GenzFunction};
use quadcal::implicit::{construct_implicit_rule, ImplicitError};
use quadcal::model::{CalibrationToy, Identity, Model};
use quadcal::proposal::sample_prior;
use quadcal::rng::{derive_seed, stream};
use quadcal::{PolynomialSpace, Rule};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Baseline, Experiment, ModelSpec, RunConfig};
use crate::protocol::SubprocessModel;
use crate::report::{self, CsvRow, LogRecord};

/// Everything one experiment produces.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    /// Per-repeat rows; `mean` rows are added when writing.
    pub rows: Vec<CsvRow>,
    pub log: Vec<LogRecord>,
    /// Final normalized rule of the first repeat of the last label.
    pub final_rule: Option<Rule>,
    pub predictive: Option<Predictive>,
    pub scaling: Vec<ScalingRow>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

/// Posterior-predictive moments of the model output at each location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Predictive {
    pub locations: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Final-iteration error of a genz_dim sweep, relative to the first dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub family: String,
    pub d: usize,
    pub mean_error: f64,
    pub scaled_error: f64,
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let go = || match config.experiment {
        Experiment::AnalyticBeta => run_analytic_beta(config),
        Experiment::Genz2d | Experiment::Genz5d => run_genz(config),
        Experiment::GenzDim => run_genz_dim(config),
        Experiment::Calibrate => run_calibrate(config),
    };
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(go),
        None => go(),
    }
}

/// Writes config snapshot, `convergence.csv`, `log.jsonl`, `rule.json` and
/// the experiment-specific extras into `dir`.
pub fn write_run(config: &RunConfig, output: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), config.to_json_pretty() + "\n")?;
    report::write_csv(&dir.join("convergence.csv"), &report::with_means(output.rows.clone()))?;
    report::write_jsonl(&dir.join("log.jsonl"), &output.log)?;
    if let Some(rule) = &output.final_rule {
        std::fs::write(dir.join("rule.json"), rule.to_json() + "\n")?;
    }
    if let Some(p) = &output.predictive {
        let mut w = csv::Writer::from_path(dir.join("predictive.csv"))?;
        w.write_record(["location", "mean", "std"])?;
        for ((s, m), v) in p.locations.iter().zip(&p.mean).zip(&p.variance) {
            w.serialize((s, m, v.sqrt()))?;
        }
        w.flush()?;
    }
    if !output.scaling.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("scaling.csv"))?;
        for r in &output.scaling {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)? + "\n",
    )?;
    Ok(())
}

/// `max_k |a_k − b_k|`.
/// Largest coordinate-wise absolute difference; NaN if any difference is.
pub fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) })
}

/// Mean and standard deviation of `x` under `x^α (1 − x)^β` on `[0, 1]`,
/// by composite 20-point Gauss–Legendre on 400 panels.
pub fn beta_oracle(alpha: f64, beta: f64) -> (f64, f64) {
    let gl = quadcal::baselines::gauss_legendre::<f64>(20);
    let panels = 400;
    let mode = if alpha + beta > 0.0 { alpha / (alpha + beta) } else { 0.5 };
    let log_peak = log_beta_kernel(alpha, beta, mode.clamp(1e-300, 1.0 - 1e-16));
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for p in 0..panels {
        let (a, b) = (p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
        for (t, w) in gl.nodes.iter().zip(&gl.weights) {
            let x = a + (t + 1.0) * 0.5 * (b - a);
            let f = (log_beta_kernel(alpha, beta, x) - log_peak).exp() * w * 0.5 * (b - a);
            m0 += f;
            m1 += f * x;
            m2 += f * x * x;
        }
    }
    let mean = m1 / m0;
    (mean, (m2 / m0 - mean * mean).max(0.0).sqrt())
}

fn log_beta_kernel(alpha: f64, beta: f64, x: f64) -> f64 {
    let term = |c: f64, v: f64| if c == 0.0 { 0.0 } else { c * v.ln() };
    term(alpha, x) + term(beta, 1.0 - x)
}

/// Self-normalized Monte Carlo posterior mean of `x` over `count` prior
/// samples, accumulated in fixed chunks with shifted exponentials.
pub fn monte_carlo_oracle(
    model: &dyn Model<f64>,
    statistical: &StatisticalModel<f64>,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 1 << 15;
    let d = statistical.prior.dimension();
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<(f64, f64, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(f64, f64, Vec<f64>)> {
            let n = CHUNK.min(count - c * CHUNK);
            let xs = sample_prior(&statistical.prior, n, derive_seed(seed, &[c as u64]));
            let us = model.evaluate_batch(&xs)?;
            let ll = us
                .iter()
                .map(|u| statistical.likelihood.log_likelihood(u))
                .collect::<Result<Vec<f64>, _>>()?;
            let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            let mut num = vec![0.0; d];
            if max > f64::NEG_INFINITY {
                for (x, l) in xs.iter().zip(&ll) {
                    let w = (l - max).exp();
                    den += w;
                    num.iter_mut().zip(x).for_each(|(a, xi)| *a += w * xi);
                }
            }
            Ok((max, den, num))
        })
        .collect::<Result<_>>()?;
    let global = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if global == f64::NEG_INFINITY {
        bail!("every oracle sample has zero likelihood");
    }
    let mut den = 0.0;
    let mut num = vec![0.0; d];
    for (m, dn, nm) in &parts {
        if *m == f64::NEG_INFINITY {
            continue;
        }
        let s = (m - global).exp();
        den += s * dn;
        num.iter_mut().zip(nm).for_each(|(a, b)| *a += s * b);
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Errors of the comparison methods at a fixed node budget.
#[derive(Debug, Clone, Copy, Default)]
struct BaselineErrors {
    prior_rule: Option<f64>,
    tensor_cc: Option<f64>,
    smolyak: Option<f64>,
}

struct BaselineContext<'a> {
    config: &'a RunConfig,
    model: &'a dyn Model<f64>,
    statistical: &'a StatisticalModel<f64>,
    oracle: &'a [f64],
    sample_count: usize,
    seed: u64,
    grids: HashMap<(u8, usize), Option<Rule>>,
}

impl BaselineContext<'_> {
    /// `None` when every node has zero likelihood, so the ratio estimate is
    /// undefined.
    fn ratio_error(&self, rule: &Rule) -> Result<Option<f64>> {
        let outputs = self.model.evaluate_batch(rule.nodes())?;
        let ll = outputs
            .iter()
            .map(|u| self.statistical.likelihood.log_likelihood(u))
            .collect::<Result<Vec<f64>, _>>()?;
        if ll.iter().all(|&l| l == f64::NEG_INFINITY) {
            return Ok(None);
        }
        let est = prior_rule_posterior_estimate(rule, rule.nodes(), &ll)?;
        Ok(Some(max_abs_error(&est, self.oracle)))
    }

    /// Implicit rule on `sample_count` prior samples with exactness count `n`.
    fn prior_rule(&self, n: usize, iteration: usize) -> Result<Option<f64>> {
        let prior = &self.statistical.prior;
        if n > self.config.prior_rule_max_nodes || self.sample_count <= n {
            return Ok(None);
        }
        let samples = sample_prior(prior, self.sample_count, derive_seed(self.seed, &[iteration as u64]));
        let space = PolynomialSpace::mapped(MultiIndexBasis::enumerate(prior.dimension(), n), prior.lower(), prior.upper())?
            .with_family(self.config.family);
        match construct_implicit_rule(&[], &samples, &space) {
            Ok(r) => self.ratio_error(&r.rule),
            Err(ImplicitError::InsufficientSamples { .. } | ImplicitError::RankDeficient { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Largest grid of the given kind with at most `budget` nodes.
    fn grid(&mut self, kind: u8, budget: usize) -> Result<Option<Rule>> {
        if let Some(r) = self.grids.get(&(kind, budget)) {
            return Ok(r.clone());
        }
        let prior = &self.statistical.prior;
        let d = prior.dimension();
        let mut best = None;
        for level in 0.. {
            let r = if kind == 0 {
                let n = level + 1;
                if (n as f64).powi(d as i32) > budget.min(MAX_GRID_NODES) as f64 {
                    break;
                }
                tensor_grid(&vec![n; d], prior)?
            } else {
                match smolyak(level, prior) {
                    Ok(r) => r,
                    Err(_) => break,
                }
            };
            if r.len() > budget {
                break;
            }
            best = Some(r);
        }
        self.grids.insert((kind, budget), best.clone());
        Ok(best)
    }

    fn at_budget(&mut self, n: usize, iteration: usize) -> Result<BaselineErrors> {
        let mut out = BaselineErrors::default();
        for b in self.config.baselines.clone() {
            match b {
                Baseline::PriorRule => out.prior_rule = self.prior_rule(n, iteration)?,
                Baseline::TensorCc => {
                    if let Some(r) = self.grid(0, n)? {
                        out.tensor_cc = self.ratio_error(&r)?;
                    }
                }
                Baseline::Smolyak => {
                    if let Some(r) = self.grid(1, n)? {
                        out.smolyak = self.ratio_error(&r)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Result of one adaptive run plus its baseline comparisons.
struct RepeatResult {
    rows: Vec<CsvRow>,
    log: Vec<LogRecord>,
    state: AdaptiveState<f64>,
}

#[allow(clippy::too_many_arguments)]
fn adaptive_repeat(
    config: &RunConfig,
    label: &str,
    repeat: usize,
    model: &dyn Model<f64>,
    statistical: &StatisticalModel<f64>,
    oracle: Option<&[f64]>,
    sample_count: usize,
    quantity: Quantity,
    seed: u64,
) -> Result<RepeatResult> {
    let adaptive = AdaptiveConfig {
        schedule: config.schedule,
        sample_count,
        max_iterations: config.max_iterations,
        tolerance: config.tolerance,
        seed: derive_seed(seed, &[1]),
        family: config.family,
        proposal: ProposalMode::Surrogate,
        quantity,
    };
    let state = run_with(model, statistical, &adaptive, |_| Ok(()))
        .with_context(|| format!("{label}, repeat {repeat}"))?;
    if let Some(reason) = state.halted() {
        eprintln!("{label}, repeat {repeat}: stopped after iteration {}: {reason}", state.iteration());
    }
    let mut ctx = oracle.map(|o| BaselineContext {
        config,
        model,
        statistical,
        oracle: o,
        sample_count,
        seed: derive_seed(seed, &[2]),
        grids: HashMap::new(),
    });
    let mut rows = Vec::new();
    let mut log = Vec::new();
    for rec in state.history() {
        let base = match ctx.as_mut() {
            Some(c) => c.at_budget(rec.node_count, rec.iteration)?,
            None => BaselineErrors::default(),
        };
        rows.push(CsvRow {
            experiment: label.to_string(),
            repeat: repeat.to_string(),
            iteration: rec.iteration,
            n: rec.node_count as f64,
            d: rec.degree,
            err_adaptive: oracle.map(|o| max_abs_error(&rec.estimate, o)),
            err_prior_rule: base.prior_rule,
            err_tensor_cc: base.tensor_cc,
            err_smolyak: base.smolyak,
            e_n: rec.consecutive_difference,
        });
        log.push(LogRecord {
            experiment: label.to_string(),
            repeat,
            iteration: rec.iteration,
            d: rec.degree,
            node_count: rec.node_count,
            new_nodes: rec.new_nodes,
            estimate: rec.estimate.clone(),
            e_n: rec.consecutive_difference,
            wall_time_s: rec.wall_time_s,
            seed: adaptive.seed,
        });
    }
    Ok(RepeatResult { rows, log, state })
}

fn collect(results: Vec<RepeatResult>, out: &mut ExperimentOutput) {
    let mut first = true;
    for r in results {
        if first {
            out.final_rule = r.state.rule().normalized().ok();
            first = false;
        }
        out.rows.extend(r.rows);
        out.log.extend(r.log);
    }
}

pub fn run_analytic_beta(config: &RunConfig) -> Result<ExperimentOutput> {
    let prior = config.prior.clone().unwrap_or_else(|| PriorBox::unit(1));
    if prior.dimension() != 1 {
        bail!("analytic_beta needs a one-dimensional prior");
    }
    let statistical = StatisticalModel {
        prior,
        likelihood: Likelihood::BetaKernel {
            alpha: config.beta.alpha,
            beta: config.beta.beta,
        },
    };
    let (mean, std) = beta_oracle(config.beta.alpha, config.beta.beta);
    let oracle = [mean];
    let model = Identity { dimension: 1 };
    let mut out = ExperimentOutput::default();
    out.summary.insert("oracle_mean".into(), mean.into());
    out.summary.insert("oracle_std".into(), std.into());
    for (ki, &k) in config.sweep().iter().enumerate() {
        let label = format!("analytic_beta/K={k}");
        let results: Vec<RepeatResult> = (0..config.repeats)
            .into_par_iter()
            .map(|r| {
                let seed = derive_seed(config.seed, &[ki as u64, r as u64]);
                adaptive_repeat(config, &label, r, &model, &statistical, Some(&oracle), k, Quantity::Parameters, seed)
            })
            .collect::<Result<_>>()?;
        out.final_rule = None;
        collect(results, &mut out);
    }
    Ok(out)
}

/// The test function of one repeat.
fn genz_instance(family: GenzFamily, d: usize, shape_norm: f64, seed: u64) -> GenzFunction {
    match family {
        GenzFamily::CenteredProductPeak | GenzFamily::CenteredC0 | GenzFamily::CenteredDiscontinuous => {
            GenzFunction::centered(family, d)
        }
        _ => random_genz(family, d, shape_norm, &mut stream(seed, &[3])),
    }
}

/// Data, statistical model and reference posterior mean of one Genz repeat.
/// The reference is exact for reflection-symmetric fixtures on a box
/// centered at ½ and a Monte Carlo estimate otherwise.
pub fn genz_setup(
    config: &RunConfig,
    family: GenzFamily,
    d: usize,
    seed: u64,
) -> Result<(GenzFunction, StatisticalModel<f64>, Vec<f64>)> {
    let g = &config.genz;
    let function = genz_instance(family, d, g.shape_norm, seed);
    let truth = g.truth.clone().unwrap_or_else(|| vec![0.5; d]);
    let data = generate_data(&function, &truth, g.sigma, g.measurements, &mut stream(seed, &[4]));
    let prior = match &config.prior {
        Some(p) if p.dimension() == d => p.clone(),
        _ => PriorBox::unit(d),
    };
    let statistical = StatisticalModel {
        prior,
        likelihood: Likelihood::GaussianIid(GaussianIid::new(data.z, g.sigma)?),
    };
    let prior = &statistical.prior;
    let centered = prior.lower().iter().zip(prior.upper()).all(|(l, u)| l + u == 1.0);
    let oracle = if family.reflection_symmetric() && centered {
        vec![0.5; d]
    } else {
        monte_carlo_oracle(&function, &statistical, g.oracle_samples, derive_seed(seed, &[5]))?
    };
    Ok((function, statistical, oracle))
}

fn genz_repeat(config: &RunConfig, label: &str, family: GenzFamily, d: usize, repeat: usize) -> Result<RepeatResult> {
    let fi = family as u64;
    let seed = derive_seed(config.seed, &[fi, d as u64, repeat as u64]);
    let (function, statistical, oracle) = genz_setup(config, family, d, seed)?;
    adaptive_repeat(
        config,
        label,
        repeat,
        &function,
        &statistical,
        Some(&oracle),
        config.sample_count,
        Quantity::Parameters,
        seed,
    )
}

pub fn run_genz(config: &RunConfig) -> Result<ExperimentOutput> {
    let d = config.genz.dimension;
    let mut out = ExperimentOutput::default();
    for &family in &config.genz.families {
        let label = format!("{}/{}", config.experiment.name(), family.name());
        let results: Vec<RepeatResult> = (0..config.repeats)
            .into_par_iter()
            .map(|r| genz_repeat(config, &label, family, d, r))
            .collect::<Result<_>>()?;
        collect(results, &mut out);
    }
    Ok(out)
}

pub fn run_genz_dim(config: &RunConfig) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for &family in &config.genz.families {
        let mut reference = None;
        for &d in &config.genz.dimensions {
            let label = format!("genz_dim/{}/d={d}", family.name());
            let results: Vec<RepeatResult> = (0..config.repeats)
                .into_par_iter()
                .map(|r| genz_repeat(config, &label, family, d, r))
                .collect::<Result<_>>()?;
            let finals: Vec<f64> = results
                .iter()
                .filter_map(|r| r.rows.last().and_then(|row| row.err_adaptive))
                .collect();
            let mean_error = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
            let reference = *reference.get_or_insert(mean_error);
            out.scaling.push(ScalingRow {
                family: family.name().into(),
                d,
                mean_error,
                scaled_error: mean_error / reference,
            });
            collect(results, &mut out);
        }
    }
    Ok(out)
}

/// Nominal closure coefficients used to synthesize calibration data.
pub const TOY_NOMINAL: [f64; 7] = [0.41, 2.0 / 3.0, 0.1355, 0.622, 7.1, 0.3, 2.0];

fn calibration_model(config: &RunConfig) -> Result<(Box<dyn Model<f64>>, Vec<f64>)> {
    let c = &config.calibrate;
    Ok(match &config.model {
        ModelSpec::Builtin(_) => {
            let toy = CalibrationToy::with_uniform_locations(c.locations);
            let locations = toy.locations().to_vec();
            (Box::new(toy), locations)
        }
        ModelSpec::Subprocess {
            command,
            timeout_s,
            retries,
            output_dim,
        } => {
            let prior = config.calibration_prior();
            let expected = output_dim.or(c.data.as_ref().map(Vec::len));
            let m = SubprocessModel::spawn(
                command.clone(),
                prior.dimension(),
                expected,
                Duration::from_secs_f64(*timeout_s),
                *retries,
            )?;
            let n = Model::<f64>::output_dim(&m);
            let locations = c
                .data_locations
                .clone()
                .unwrap_or_else(|| CalibrationToy::with_uniform_locations(n).locations().to_vec());
            (Box::new(m), locations)
        }
    })
}

/// Forward model, statistical model and output locations of a calibration run.
pub struct CalibrationProblem {
    pub model: Box<dyn Model<f64>>,
    pub statistical: StatisticalModel<f64>,
    pub locations: Vec<f64>,
}

/// Builds the calibration problem, synthesizing data when none are given.
pub fn calibration_problem(config: &RunConfig) -> Result<CalibrationProblem> {
    let c = &config.calibrate;
    let prior = config.calibration_prior();
    let (model, default_locations) = calibration_model(config)?;
    if model.input_dim() != prior.dimension() {
        bail!("model takes {} parameters but the prior box has {}", model.input_dim(), prior.dimension());
    }
    let locations = c.data_locations.clone().unwrap_or(default_locations);
    let data = match &c.data {
        Some(d) => d.clone(),
        None => {
            let truth = c.truth.clone().unwrap_or_else(|| TOY_NOMINAL.to_vec());
            let clean = model.evaluate_batch(&[truth])?.remove(0);
            let noise = gaussian_noise(clean.len(), c.sigma, &mut stream(config.seed, &[0]));
            clean.iter().zip(noise).map(|(u, n)| u + n).collect()
        }
    };
    let gp = GpDiscrepancy {
        data,
        locations: locations.clone(),
        sigma: c.sigma,
        length_scale: c.length_scale,
        amplitude_range: c.amplitude_range,
        log_length_range: c.log_length_range,
        include_logdet: c.include_logdet,
        grid: c.grid,
    };
    gp.validate()?;
    let statistical = StatisticalModel {
        prior,
        likelihood: Likelihood::GpDiscrepancy(gp),
    };
    Ok(CalibrationProblem {
        model,
        statistical,
        locations,
    })
}

pub fn run_calibrate(config: &RunConfig) -> Result<ExperimentOutput> {
    let CalibrationProblem {
        model,
        statistical,
        locations,
    } = calibration_problem(config)?;
    let mut out = ExperimentOutput::default();
    let results: Vec<RepeatResult> = (0..config.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.seed, &[1, r as u64]);
            adaptive_repeat(
                config,
                "calibrate",
                r,
                model.as_ref(),
                &statistical,
                None,
                config.sample_count,
                Quantity::Outputs,
                seed,
            )
        })
        .collect::<Result<_>>()?;
    let state = &results[0].state;
    out.predictive = Some(predictive(state, locations)?);
    out.summary.insert(
        "evaluations".into(),
        serde_json::Value::from(results.iter().map(|r| r.state.evaluations()).sum::<usize>()),
    );
    collect(results, &mut out);
    Ok(out)
}

/// Posterior mean and variance of every output component under the rule.
/// Variances are central second moments, so positive weights keep them ≥ 0.
pub fn predictive(state: &AdaptiveState<f64>, locations: Vec<f64>) -> Result<Predictive> {
    let rule = state.rule().normalized()?;
    let outputs = state.outputs();
    let mean = rule.apply(outputs)?.value;
    let centered: Vec<Vec<f64>> = outputs
        .iter()
        .map(|u| u.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).collect())
        .collect();
    let variance = rule.apply(&centered)?.value;
    Ok(Predictive {
        locations,
        mean,
        variance,
    })
}
