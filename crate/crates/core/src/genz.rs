//! Genz test functions and synthetic measurement data.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::scalar::Scalar;

/// Default Euclidean norm of the shape vector.
pub const DEFAULT_SHAPE_NORM: f64 = 2.5;
/// Measurement count and noise standard deviation of the synthetic data.
pub const DEFAULT_MEASUREMENTS: usize = 20;
pub const DEFAULT_SIGMA: f64 = 0.447_213_595_499_957_94; // √(1/5)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenzFamily {
    Oscillatory,
    ProductPeak,
    CornerPeak,
    Gaussian,
    C0,
    Discontinuous,
    /// `∏ [¼ + (x_i − ½)²]⁻¹`.
    CenteredProductPeak,
    /// `exp(−Σ |x_i − ½|)`.
    CenteredC0,
    /// `0` if `x₁ > 3/5` and `x₂ > 3/5`, else `exp(Σ x_i)`.
    CenteredDiscontinuous,
}

impl GenzFamily {
    /// The six parameterized families, in their customary order.
    pub const PARAMETERIZED: [GenzFamily; 6] = [
        GenzFamily::Oscillatory,
        GenzFamily::ProductPeak,
        GenzFamily::CornerPeak,
        GenzFamily::Gaussian,
        GenzFamily::C0,
        GenzFamily::Discontinuous,
    ];

    /// Whether the function is unchanged by `x_i ↦ 1 − x_i` in every
    /// coordinate. A posterior built from such a function and a prior box
    /// symmetric about ½ then has mean exactly ½ in every coordinate.
    pub fn reflection_symmetric(self) -> bool {
        matches!(self, Self::CenteredProductPeak | Self::CenteredC0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Oscillatory => "oscillatory",
            Self::ProductPeak => "product_peak",
            Self::CornerPeak => "corner_peak",
            Self::Gaussian => "gaussian",
            Self::C0 => "c0",
            Self::Discontinuous => "discontinuous",
            Self::CenteredProductPeak => "centered_product_peak",
            Self::CenteredC0 => "centered_c0",
            Self::CenteredDiscontinuous => "centered_discontinuous",
        }
    }
}

/// A Genz function with shape vector `a` and translation vector `b`.
///
/// The centered families ignore `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenzFunction {
    pub family: GenzFamily,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GenzFunction {
    pub fn centered(family: GenzFamily, d: usize) -> Self {
        Self {
            family,
            a: vec![0.0; d],
            b: vec![0.5; d],
        }
    }

    pub fn dimension(&self) -> usize {
        self.a.len()
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let (a, b) = (&self.a, &self.b);
        let d = x.len();
        match self.family {
            GenzFamily::Oscillatory => {
                let s: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
                (2.0 * std::f64::consts::PI * b[0] + s).cos()
            }
            GenzFamily::ProductPeak => x
                .iter()
                .zip(a.iter().zip(b))
                .map(|(xi, (ai, bi))| 1.0 / (ai.powi(-2) + (xi - bi).powi(2)))
                .product(),
            GenzFamily::CornerPeak => {
                let s: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
                (1.0 + s).powi(-(d as i32 + 1))
            }
            GenzFamily::Gaussian => {
                let s: f64 = x.iter().zip(a.iter().zip(b)).map(|(xi, (ai, bi))| ai * ai * (xi - bi).powi(2)).sum();
                (-s).exp()
            }
            GenzFamily::C0 => {
                let s: f64 = x.iter().zip(a.iter().zip(b)).map(|(xi, (ai, bi))| ai * (xi - bi).abs()).sum();
                (-s).exp()
            }
            GenzFamily::Discontinuous => {
                if x[0] > b[0] || (d > 1 && x[1] > b[1]) {
                    0.0
                } else {
                    a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>().exp()
                }
            }
            GenzFamily::CenteredProductPeak => x.iter().map(|xi| 1.0 / (0.25 + (xi - 0.5).powi(2))).product(),
            GenzFamily::CenteredC0 => (-x.iter().map(|xi| (xi - 0.5).abs()).sum::<f64>()).exp(),
            GenzFamily::CenteredDiscontinuous => {
                if x[0] > 0.6 && d > 1 && x[1] > 0.6 {
                    0.0
                } else {
                    x.iter().sum::<f64>().exp()
                }
            }
        }
    }
}

impl<T: Scalar> Model<T> for GenzFunction {
    fn input_dim(&self) -> usize {
        self.dimension()
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[T]) -> Result<Vec<T>, String> {
        let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
        Ok(vec![T::lit(GenzFunction::evaluate(self, &xf))])
    }
}

/// Draws `a, b ~ U[0,1]^d` and rescales `a` to Euclidean norm `scale`.
/// An all-zero `a` is redrawn.
pub fn random_genz<R: Rng + ?Sized>(family: GenzFamily, d: usize, scale: f64, rng: &mut R) -> GenzFunction {
    assert!(scale > 0.0, "shape norm must be positive");
    let mut a: Vec<f64>;
    loop {
        a = (0..d).map(|_| rng.random::<f64>()).collect();
        if a.iter().any(|&v| v > 0.0) {
            break;
        }
    }
    let b: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter_mut().for_each(|v| *v *= scale / norm);
    GenzFunction { family, a, b }
}

/// Noisy measurements `z_k = u(x*) + n_k`, `n_k ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub z: Vec<f64>,
    pub truth: Vec<f64>,
    pub sigma: f64,
}

/// `n` independent draws from `N(0, σ²)`; zeros when `σ = 0`.
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub fn generate_data<R: Rng + ?Sized>(
    function: &GenzFunction,
    truth: &[f64],
    sigma: f64,
    m: usize,
    rng: &mut R,
) -> SyntheticDataset {
    assert!(m >= 1 && sigma >= 0.0, "need m >= 1 and sigma >= 0");
    let u = function.evaluate(truth);
    let z = gaussian_noise(m, sigma, rng).into_iter().map(|n| u + n).collect();
    SyntheticDataset {
        z,
        truth: truth.to_vec(),
        sigma,
    }
}
