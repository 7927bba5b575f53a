//! Deterministic forward models `u(x)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model failed at point {index}: {message}")]
    Failed { index: usize, message: String },
    #[error("model returned a non-finite value at point {index}")]
    NonFinite { index: usize },
    #[error("model returned {found} outputs at point {index}, expected {expected}")]
    OutputDim { index: usize, expected: usize, found: usize },
    #[error("point {index} has dimension {found}, model expects {expected}")]
    InputDim { index: usize, expected: usize, found: usize },
}

/// A forward model with fixed input and output dimensions.
///
/// Implementations must be deterministic: the same point always yields the
/// same output, which is what allows evaluations to be cached for reuse.
pub trait Model<T: Scalar>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Output at a single point.
    fn evaluate(&self, x: &[T]) -> Result<Vec<T>, String>;

    /// Outputs for a batch, in input order. Points are evaluated in parallel
    /// by default; outputs are checked for dimension and finiteness.
    fn evaluate_batch(&self, points: &[Vec<T>]) -> Result<Vec<Vec<T>>, ModelError> {
        let raw: Vec<Result<Vec<T>, String>> = points.par_iter().map(|p| self.evaluate(p)).collect();
        let mut out = Vec::with_capacity(points.len());
        for (index, r) in raw.into_iter().enumerate() {
            let v = r.map_err(|message| ModelError::Failed { index, message })?;
            out.push(v);
        }
        check_outputs(points, &out, self.input_dim(), self.output_dim())?;
        Ok(out)
    }
}

/// Validates shapes and finiteness of a batch of model outputs.
pub fn check_outputs<T: Scalar>(
    points: &[Vec<T>],
    outputs: &[Vec<T>],
    input_dim: usize,
    output_dim: usize,
) -> Result<(), ModelError> {
    for (index, p) in points.iter().enumerate() {
        if p.len() != input_dim {
            return Err(ModelError::InputDim {
                index,
                expected: input_dim,
                found: p.len(),
            });
        }
    }
    for (index, v) in outputs.iter().enumerate() {
        if v.len() != output_dim {
            return Err(ModelError::OutputDim {
                index,
                expected: output_dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
    }
    Ok(())
}

/// `u(x) = x`.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub dimension: usize,
}

impl<T: Scalar> Model<T> for Identity {
    fn input_dim(&self) -> usize {
        self.dimension
    }

    fn output_dim(&self) -> usize {
        self.dimension
    }

    fn evaluate(&self, x: &[T]) -> Result<Vec<T>, String> {
        Ok(x.to_vec())
    }
}

/// Wraps a closure as a model.
pub struct FnModel<F> {
    input_dim: usize,
    output_dim: usize,
    f: F,
}

impl<F> FnModel<F> {
    pub fn new(input_dim: usize, output_dim: usize, f: F) -> Self {
        Self { input_dim, output_dim, f }
    }
}

impl<T: Scalar, F> Model<T> for FnModel<F>
where
    F: Fn(&[T]) -> Vec<T> + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn evaluate(&self, x: &[T]) -> Result<Vec<T>, String> {
        Ok((self.f)(x))
    }
}

/// Bounds of the seven closure coefficients used by the calibration toy:
/// κ, σ, C_b1, C_b2, C_v1, C_w2, C_w3.
pub const TOY_LOWER: [f64; 7] = [0.205, 1.0 / 3.0, 0.0678, 0.311, 3.55, 0.2, 1.0];
pub const TOY_UPPER: [f64; 7] = [0.615, 1.0, 0.2033, 0.933, 10.65, 0.4, 3.0];

/// A smooth vector-valued map from seven coefficients to a profile sampled at
/// fixed locations `s ∈ [0, 2]`, standing in for an expensive flow solver.
#[derive(Debug, Clone)]
pub struct CalibrationToy {
    locations: Vec<f64>,
}

impl CalibrationToy {
    pub fn new(locations: Vec<f64>) -> Self {
        Self { locations }
    }

    /// `count` equally spaced locations on `[0, 2]`.
    pub fn with_uniform_locations(count: usize) -> Self {
        let step = if count > 1 { 2.0 / (count - 1) as f64 } else { 0.0 };
        Self::new((0..count).map(|i| i as f64 * step).collect())
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    fn profile(&self, t: &[f64]) -> Vec<f64> {
        use std::f64::consts::PI;
        self.locations
            .iter()
            .map(|&s| {
                -0.5 + 0.3 * t[0] * (PI * s).cos()
                    + 0.2 * t[1] * (-(s - 0.6).powi(2) / (0.05 + 0.1 * t[2])).exp()
                    + 0.1 * t[3] * s
                    + 0.05 * t[4] * t[5] * (2.0 * PI * s).sin()
                    + 0.05 * t[6] * s * s
            })
            .collect()
    }
}

impl<T: Scalar> Model<T> for CalibrationToy {
    fn input_dim(&self) -> usize {
        7
    }

    fn output_dim(&self) -> usize {
        self.locations.len()
    }

    fn evaluate(&self, x: &[T]) -> Result<Vec<T>, String> {
        if x.len() != 7 {
            return Err(format!("expected 7 coefficients, got {}", x.len()));
        }
        let t: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| (v.to_f64_lossy() - TOY_LOWER[i]) / (TOY_UPPER[i] - TOY_LOWER[i]))
            .collect();
        Ok(self.profile(&t).into_iter().map(T::lit).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky;
    impl Model<f64> for Flaky {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>, String> {
            if x[0] > 0.5 {
                Ok(vec![f64::NAN])
            } else {
                Ok(vec![x[0]])
            }
        }
    }

    #[test]
    fn batch_checks() {
        let pts = vec![vec![0.1], vec![0.7]];
        assert_eq!(Flaky.evaluate_batch(&pts), Err(ModelError::NonFinite { index: 1 }));
        assert_eq!(Flaky.evaluate_batch(&[]).unwrap(), Vec::<Vec<f64>>::new());
        let id = Identity { dimension: 2 };
        assert_eq!(id.evaluate_batch(&[vec![1.0, 2.0]]).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(matches!(id.evaluate_batch(&[vec![1.0f64]]), Err(ModelError::InputDim { .. })));
    }

    #[test]
    fn toy_is_smooth_and_sized() {
        let m = CalibrationToy::with_uniform_locations(20);
        let mid: Vec<f64> = TOY_LOWER.iter().zip(&TOY_UPPER).map(|(l, u)| 0.5 * (l + u)).collect();
        let u = Model::<f64>::evaluate(&m, &mid).unwrap();
        assert_eq!(u.len(), 20);
        assert!(u.iter().all(|v| v.is_finite() && v.abs() < 2.0));
        let mut near = mid.clone();
        near[4] += 1e-6;
        let v = Model::<f64>::evaluate(&m, &near).unwrap();
        assert!(u.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
