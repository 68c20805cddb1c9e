use serde::{Deserialize, Serialize};

/// Default nugget `epsilon`; the covariance used for solves is `K + epsilon^2 I`.
pub const DEFAULT_NUGGET: f64 = 1e-5;

/// Anisotropic Matérn-5/2 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub nugget: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, length_scales: Vec<f64>) -> Self {
        Self {
            signal_variance,
            length_scales,
            nugget: DEFAULT_NUGGET,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.signal_variance > 0.0
            && self.nugget >= 0.0
            && !self.length_scales.is_empty()
            && self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite())
    }
}

/// `sigma_f^2 (1 + sqrt5 d + 5 d^2 / 3) exp(-sqrt5 d)` with
/// `d^2 = sum_j ((x_j - y_j) / l_j)^2`.
pub fn matern52(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    debug_assert_eq!(x.len(), params.length_scales.len());
    debug_assert_eq!(y.len(), params.length_scales.len());
    let d2: f64 = x
        .iter()
        .zip(y)
        .zip(&params.length_scales)
        .map(|((a, b), l)| {
            let u = (a - b) / l;
            u * u
        })
        .sum();
    params.signal_variance * matern52_profile(d2)
}

/// Unit-variance Matérn-5/2 as a function of the squared scaled distance.
#[inline(always)]
pub(crate) fn matern52_profile(d2: f64) -> f64 {
    let s = (5.0 * d2).sqrt();
    (1.0 + s + s * s / 3.0) * (-s).exp()
}
