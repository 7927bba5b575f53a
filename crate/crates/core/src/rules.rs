//! Quadrature rules: nodes, weights, estimates, nesting checks and the JSON rule file.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule has no nodes")]
    Empty,
    #[error("{nodes} nodes but {weights} weights")]
    LengthMismatch { nodes: usize, weights: usize },
    #[error("node {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("weight {index} is negative ({value:e})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("non-finite value in node or weight {index}")]
    NonFinite { index: usize },
    #[error("nodes {first} and {second} coincide")]
    DuplicateNode { first: usize, second: usize },
    #[error("evaluated_count {evaluated} exceeds node count {nodes}")]
    EvaluatedCount { evaluated: usize, nodes: usize },
    #[error("expected {expected} integrand values, got {found}")]
    ValueCount { expected: usize, found: usize },
    #[error("integrand value {index} has length {found}, expected {expected}")]
    ValueLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("malformed rule file at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Clamps rounding-level negative weights; anything further below zero is an error.
pub fn clamp_weights<T: Scalar>(weights: &mut [T]) -> Result<(), RuleError> {
    let slack = T::negative_weight_slack();
    for (i, w) in weights.iter_mut().enumerate() {
        if !w.is_finite() {
            return Err(RuleError::NonFinite { index: i });
        }
        if *w < T::zero() {
            if *w >= -slack {
                *w = T::zero();
            } else {
                return Err(RuleError::NegativeWeight {
                    index: i,
                    value: w.to_f64_lossy(),
                });
            }
        }
    }
    Ok(())
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Nodes and weights with provenance.
///
/// `evaluated_count` leading nodes carry cached model evaluations. Rules built
/// by the positive construction never hold negative weights; sparse-grid
/// baselines are created through [`QuadratureRule::signed`] and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    nodes: Vec<Vec<T>>,
    weights: Vec<T>,
    exactness_count: usize,
    evaluated_count: usize,
    signed: bool,
}

impl<T: Scalar> QuadratureRule<T> {
    pub fn new(
        nodes: Vec<Vec<T>>,
        mut weights: Vec<T>,
        exactness_count: usize,
        evaluated_count: usize,
    ) -> Result<Self, RuleError> {
        Self::validate_shape(&nodes, &weights, evaluated_count)?;
        clamp_weights(&mut weights)?;
        Self::validate_distinct(&nodes)?;
        Ok(Self {
            nodes,
            weights,
            exactness_count,
            evaluated_count,
            signed: false,
        })
    }

    /// A rule whose weights may be negative (e.g. Smolyak combinations).
    pub fn signed(nodes: Vec<Vec<T>>, weights: Vec<T>, exactness_count: usize) -> Result<Self, RuleError> {
        Self::validate_shape(&nodes, &weights, 0)?;
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(RuleError::NonFinite { index: i });
        }
        Self::validate_distinct(&nodes)?;
        Ok(Self {
            nodes,
            weights,
            exactness_count,
            evaluated_count: 0,
            signed: true,
        })
    }

    fn validate_shape(nodes: &[Vec<T>], weights: &[T], evaluated: usize) -> Result<(), RuleError> {
        if nodes.is_empty() {
            return Err(RuleError::Empty);
        }
        if nodes.len() != weights.len() {
            return Err(RuleError::LengthMismatch {
                nodes: nodes.len(),
                weights: weights.len(),
            });
        }
        let d = nodes[0].len();
        for (i, n) in nodes.iter().enumerate() {
            if n.len() != d {
                return Err(RuleError::DimensionMismatch {
                    index: i,
                    expected: d,
                    found: n.len(),
                });
            }
            if n.iter().any(|x| !x.is_finite()) {
                return Err(RuleError::NonFinite { index: i });
            }
        }
        if evaluated > nodes.len() {
            return Err(RuleError::EvaluatedCount {
                evaluated,
                nodes: nodes.len(),
            });
        }
        Ok(())
    }

    fn validate_distinct(nodes: &[Vec<T>]) -> Result<(), RuleError> {
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&a, &b| lex_cmp(&nodes[a], &nodes[b]));
        for w in order.windows(2) {
            if nodes[w[0]] == nodes[w[1]] {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(RuleError::DuplicateNode { first, second });
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Vec<T>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.nodes[0].len()
    }

    /// `D + 1`: the size of the basis prefix this rule matches.
    pub fn exactness_count(&self) -> usize {
        self.exactness_count
    }

    pub fn evaluated_count(&self) -> usize {
        self.evaluated_count
    }

    /// True when weights may be negative.
    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn total_weight(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn min_weight(&self) -> T {
        self.weights.iter().fold(T::infinity(), |m, &w| m.min(w))
    }

    /// Returns the same rule with `evaluated_count` replaced.
    pub fn with_evaluated_count(mut self, evaluated: usize) -> Result<Self, RuleError> {
        if evaluated > self.len() {
            return Err(RuleError::EvaluatedCount {
                evaluated,
                nodes: self.len(),
            });
        }
        self.evaluated_count = evaluated;
        Ok(self)
    }

    /// `Σ w_k f(x_k)` together with `Σ w_k`.
    pub fn apply(&self, values: &[Vec<T>]) -> Result<RuleEstimate<T>, RuleError> {
        if values.len() != self.len() {
            return Err(RuleError::ValueCount {
                expected: self.len(),
                found: values.len(),
            });
        }
        let n = values[0].len();
        let mut acc = vec![T::zero(); n];
        for (i, (v, &w)) in values.iter().zip(&self.weights).enumerate() {
            if v.len() != n {
                return Err(RuleError::ValueLength {
                    index: i,
                    expected: n,
                    found: v.len(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(v) {
                *a = *a + w * x;
            }
        }
        Ok(RuleEstimate {
            value: acc,
            normalization: self.total_weight(),
        })
    }

    /// `Σ w_k f(x_k) / Σ w_k`.
    pub fn apply_normalized(&self, values: &[Vec<T>]) -> Result<Vec<T>, RuleError> {
        let est = self.apply(values)?;
        if est.normalization == T::zero() {
            return Err(RuleError::ZeroTotalWeight);
        }
        Ok(est.value.into_iter().map(|v| v / est.normalization).collect())
    }

    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<Self, RuleError> {
        let total = self.total_weight();
        if total == T::zero() {
            return Err(RuleError::ZeroTotalWeight);
        }
        let mut out = self.clone();
        for w in &mut out.weights {
            *w = *w / total;
        }
        Ok(out)
    }

    pub fn to_file(&self) -> RuleFile {
        RuleFile {
            dimension: self.dimension(),
            nodes: self
                .nodes
                .iter()
                .map(|n| n.iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
            weights: self.weights.iter().map(|w| w.to_f64_lossy()).collect(),
            exactness_count: self.exactness_count,
            evaluated_count: self.evaluated_count,
            signed_weights: self.signed,
        }
    }

    pub fn from_file(file: RuleFile) -> Result<Self, RuleError> {
        let conv = |x: f64| T::from_f64(x).filter(|v| v.is_finite());
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for (i, n) in file.nodes.iter().enumerate() {
            if n.len() != file.dimension {
                return Err(RuleError::DimensionMismatch {
                    index: i,
                    expected: file.dimension,
                    found: n.len(),
                });
            }
            let node: Option<Vec<T>> = n.iter().map(|&x| conv(x)).collect();
            nodes.push(node.ok_or(RuleError::NonFinite { index: i })?);
        }
        let weights: Vec<T> = file
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| conv(w).ok_or(RuleError::NonFinite { index: i }))
            .collect::<Result<_, _>>()?;
        if file.signed_weights {
            Self::signed(nodes, weights, file.exactness_count)
        } else {
            Self::new(nodes, weights, file.exactness_count, file.evaluated_count)
        }
    }

    /// JSON rule file; numbers use shortest round-trip formatting.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("rule file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let file: RuleFile = serde_json::from_str(text).map_err(parse_error)?;
        Self::from_file(file)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<(), RuleError> {
        w.write_all(self.to_json().as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(mut r: R) -> Result<Self, RuleError> {
        let mut buf = String::new();
        r.read_to_string(&mut buf)?;
        Self::from_json(&buf)
    }
}

fn parse_error(e: serde_json::Error) -> RuleError {
    RuleError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// On-disk rule representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub dimension: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub exactness_count: usize,
    pub evaluated_count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub signed_weights: bool,
}

/// Result of applying a rule to a (possibly vector-valued) integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleEstimate<T> {
    pub value: Vec<T>,
    pub normalization: T,
}

/// Default node-identity tolerance for a box with the given diameter.
pub fn nesting_tolerance<T: Scalar>(box_diameter: T) -> T {
    T::lit(1e-12) * (T::one() + box_diameter)
}

/// True iff every node of `coarse` appears in `fine` within `tol` coordinate-wise.
pub fn is_nested<T: Scalar>(coarse: &QuadratureRule<T>, fine: &QuadratureRule<T>, tol: T) -> bool {
    if coarse.dimension() != fine.dimension() {
        return false;
    }
    coarse.nodes().iter().all(|c| {
        fine.nodes()
            .iter()
            .any(|f| c.iter().zip(f).all(|(&a, &b)| (a - b).abs() <= tol))
    })
}
