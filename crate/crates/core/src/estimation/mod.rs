//! Recursive projected MLEs for the unknown return parameters and the
//! confidence regions built around them.
//!
//! With the variance known the estimate is the running sample mean; with both
//! parameters unknown it is the running (mean, population variance) pair.
//! Every update is followed by a projection onto the uncertainty rectangle.
//! The regions are the closed interval `c +/- sigma q / sqrt(t)` and the
//! chi-square ellipse around `(mu_hat, sigma2_hat)`, both clipped to the
//! rectangle. At `t = 0` the region is the whole rectangle.

mod quantile;

pub use quantile::{chi2_2_upper_quantile, normal_quantile, two_sided_normal_critical};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::ThetaPoint;

/// Relative slack admitted on the ellipse boundary when filtering grid points.
const BOUNDARY_SLACK: f64 = 1e-12;

/// The known parameter rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case")]
pub enum UncertaintySet {
    /// Unknown mean, known variance.
    MeanOnly { mu_lo: f64, mu_hi: f64, sigma2: f64 },
    /// Unknown mean and variance.
    MeanVariance {
        mu_lo: f64,
        mu_hi: f64,
        sigma2_lo: f64,
        sigma2_hi: f64,
    },
}

impl UncertaintySet {
    pub fn mean_only(mu_lo: f64, mu_hi: f64, sigma2: f64) -> Result<Self> {
        let set = UncertaintySet::MeanOnly { mu_lo, mu_hi, sigma2 };
        set.validate()?;
        Ok(set)
    }

    pub fn mean_variance(mu_lo: f64, mu_hi: f64, sigma2_lo: f64, sigma2_hi: f64) -> Result<Self> {
        let set = UncertaintySet::MeanVariance {
            mu_lo,
            mu_hi,
            sigma2_lo,
            sigma2_hi,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let (mu_lo, mu_hi) = self.mu_bounds();
        if !(mu_lo <= mu_hi) || !mu_lo.is_finite() || !mu_hi.is_finite() {
            return Err(Error::config(
                "uncertainty.mu",
                format!("need mu_lo <= mu_hi, got [{mu_lo}, {mu_hi}]"),
            ));
        }
        match *self {
            UncertaintySet::MeanOnly { sigma2, .. } => {
                if !(sigma2 > 0.0) || !sigma2.is_finite() {
                    return Err(Error::config("uncertainty.sigma", "known variance must be positive"));
                }
            }
            UncertaintySet::MeanVariance {
                sigma2_lo, sigma2_hi, ..
            } => {
                if !(sigma2_lo > 0.0) || !(sigma2_lo <= sigma2_hi) || !sigma2_hi.is_finite() {
                    return Err(Error::config(
                        "uncertainty.sigma",
                        format!("need 0 < sigma2_lo <= sigma2_hi, got [{sigma2_lo}, {sigma2_hi}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn learns_variance(&self) -> bool {
        matches!(self, UncertaintySet::MeanVariance { .. })
    }

    /// Dimension of the augmented state `(w, c)`.
    pub fn state_dim(&self) -> usize {
        if self.learns_variance() {
            3
        } else {
            2
        }
    }

    pub fn mu_bounds(&self) -> (f64, f64) {
        match *self {
            UncertaintySet::MeanOnly { mu_lo, mu_hi, .. } | UncertaintySet::MeanVariance { mu_lo, mu_hi, .. } => {
                (mu_lo, mu_hi)
            }
        }
    }

    /// Variance bounds; both ends coincide when the variance is known.
    pub fn sigma2_bounds(&self) -> (f64, f64) {
        match *self {
            UncertaintySet::MeanOnly { sigma2, .. } => (sigma2, sigma2),
            UncertaintySet::MeanVariance {
                sigma2_lo, sigma2_hi, ..
            } => (sigma2_lo, sigma2_hi),
        }
    }

    pub fn contains(&self, theta: &ThetaPoint) -> bool {
        let (mu_lo, mu_hi) = self.mu_bounds();
        let (s_lo, s_hi) = self.sigma2_bounds();
        (mu_lo..=mu_hi).contains(&theta.mu) && (s_lo..=s_hi).contains(&theta.sigma2)
    }

    /// Initial estimator state; the variance guess is ignored when the variance is known.
    pub fn initial_estimate(&self, mu0: f64, sigma2_0: Option<f64>) -> Result<EstimatorState> {
        let sigma2 = match (*self, sigma2_0) {
            (UncertaintySet::MeanOnly { sigma2, .. }, _) => sigma2,
            (UncertaintySet::MeanVariance { .. }, Some(s)) => s,
            (UncertaintySet::MeanVariance { .. }, None) => {
                return Err(Error::config("guess.sigma0", "an initial variance guess is required"))
            }
        };
        let theta = ThetaPoint { mu: mu0, sigma2 };
        if !self.contains(&theta) {
            return Err(Error::config(
                "guess",
                format!("initial guess ({mu0}, {sigma2}) lies outside the uncertainty set"),
            ));
        }
        Ok(EstimatorState {
            t: 0,
            c_mu: mu0,
            c_sigma2: sigma2,
        })
    }
}

/// Running projected estimate `C_t` after `t` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub t: usize,
    pub c_mu: f64,
    pub c_sigma2: f64,
}

impl EstimatorState {
    /// Same estimate, relabelled as having absorbed `t` observations.
    pub fn at_time(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn theta(&self) -> ThetaPoint {
        ThetaPoint {
            mu: self.c_mu,
            sigma2: self.c_sigma2,
        }
    }
}

/// Euclidean nearest point of the rectangle, i.e. coordinatewise clipping.
pub fn project_rectangle(point: ThetaPoint, set: &UncertaintySet) -> ThetaPoint {
    let (mu_lo, mu_hi) = set.mu_bounds();
    let (s_lo, s_hi) = set.sigma2_bounds();
    ThetaPoint {
        mu: point.mu.clamp(mu_lo, mu_hi),
        sigma2: point.sigma2.clamp(s_lo, s_hi),
    }
}

/// Sample-mean recursion with projection; the variance coordinate stays at the known value.
pub fn mle_update_case1(c: &EstimatorState, z: f64, set: &UncertaintySet) -> EstimatorState {
    let t = c.t as f64;
    let mu = (t / (t + 1.0)) * c.c_mu + z / (t + 1.0);
    let (mu_lo, mu_hi) = set.mu_bounds();
    let (s_lo, _) = set.sigma2_bounds();
    EstimatorState {
        t: c.t + 1,
        c_mu: mu.clamp(mu_lo, mu_hi),
        c_sigma2: if set.learns_variance() { c.c_sigma2 } else { s_lo },
    }
}

/// Joint mean/variance recursion with projection onto the rectangle.
pub fn mle_update_case2(c: &EstimatorState, z: f64, set: &UncertaintySet) -> EstimatorState {
    let t = c.t as f64;
    let w = t / (t + 1.0);
    let mu = w * c.c_mu + z / (t + 1.0);
    let dev = c.c_mu - z;
    let sigma2 = w * c.c_sigma2 + (t / ((t + 1.0) * (t + 1.0))) * dev * dev;
    let p = project_rectangle(ThetaPoint { mu, sigma2 }, set);
    EstimatorState {
        t: c.t + 1,
        c_mu: p.mu,
        c_sigma2: p.sigma2,
    }
}

/// Dispatches on whether the set treats the variance as unknown.
#[inline]
pub fn mle_update(c: &EstimatorState, z: f64, set: &UncertaintySet) -> EstimatorState {
    if set.learns_variance() {
        mle_update_case2(c, z, set)
    } else {
        mle_update_case1(c, z, set)
    }
}

/// A time-`t` confidence region `tau(t, c)`, always a subset of the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConfidenceRegion {
    /// Closed mean interval with the variance fixed.
    Interval { lo: f64, hi: f64, sigma2: f64 },
    /// `{(mu, s2) in box : (t/c'')(c'-mu)^2 + (t/(2c''^2))(c''-s2)^2 <= kappa}`.
    /// `box` is the ellipse's bounding box clipped to the rectangle.
    Ellipse {
        center: ThetaPoint,
        mu_weight: f64,
        sigma2_weight: f64,
        kappa: f64,
        mu_lo: f64,
        mu_hi: f64,
        sigma2_lo: f64,
        sigma2_hi: f64,
    },
    /// The full mean/variance rectangle.
    Rectangle {
        mu_lo: f64,
        mu_hi: f64,
        sigma2_lo: f64,
        sigma2_hi: f64,
    },
}

impl ConfidenceRegion {
    pub fn contains(&self, theta: &ThetaPoint) -> bool {
        match *self {
            ConfidenceRegion::Interval { lo, hi, sigma2 } => (lo..=hi).contains(&theta.mu) && theta.sigma2 == sigma2,
            ConfidenceRegion::Rectangle {
                mu_lo,
                mu_hi,
                sigma2_lo,
                sigma2_hi,
            } => (mu_lo..=mu_hi).contains(&theta.mu) && (sigma2_lo..=sigma2_hi).contains(&theta.sigma2),
            ConfidenceRegion::Ellipse {
                mu_lo,
                mu_hi,
                sigma2_lo,
                sigma2_hi,
                kappa,
                ..
            } => {
                (mu_lo..=mu_hi).contains(&theta.mu)
                    && (sigma2_lo..=sigma2_hi).contains(&theta.sigma2)
                    && self.quadratic_form(theta).unwrap_or(0.0) <= kappa * (1.0 + BOUNDARY_SLACK)
            }
        }
    }

    /// Ellipse quadratic form at `theta`; `None` for the other shapes.
    pub fn quadratic_form(&self, theta: &ThetaPoint) -> Option<f64> {
        match *self {
            ConfidenceRegion::Ellipse {
                center,
                mu_weight,
                sigma2_weight,
                ..
            } => {
                let dm = center.mu - theta.mu;
                let ds = center.sigma2 - theta.sigma2;
                Some(mu_weight * dm * dm + sigma2_weight * ds * ds)
            }
            _ => None,
        }
    }

    /// Bounding box `(mu_lo, mu_hi, sigma2_lo, sigma2_hi)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            ConfidenceRegion::Interval { lo, hi, sigma2 } => (lo, hi, sigma2, sigma2),
            ConfidenceRegion::Ellipse {
                mu_lo,
                mu_hi,
                sigma2_lo,
                sigma2_hi,
                ..
            }
            | ConfidenceRegion::Rectangle {
                mu_lo,
                mu_hi,
                sigma2_lo,
                sigma2_hi,
            } => (mu_lo, mu_hi, sigma2_lo, sigma2_hi),
        }
    }
}

/// The whole rectangle as a region (strong-robust adversary, or no data yet).
pub fn full_region(set: &UncertaintySet) -> ConfidenceRegion {
    match *set {
        UncertaintySet::MeanOnly { mu_lo, mu_hi, sigma2 } => ConfidenceRegion::Interval {
            lo: mu_lo,
            hi: mu_hi,
            sigma2,
        },
        UncertaintySet::MeanVariance {
            mu_lo,
            mu_hi,
            sigma2_lo,
            sigma2_hi,
        } => ConfidenceRegion::Rectangle {
            mu_lo,
            mu_hi,
            sigma2_lo,
            sigma2_hi,
        },
    }
}

/// Mean interval `[max(c - sigma q / sqrt t, mu_lo), min(c + sigma q / sqrt t, mu_hi)]`
/// with `q = Phi^{-1}(1 - alpha/2)`. If clipping inverts the bounds the
/// interval collapses onto the projected centre.
pub fn region_case1(
    t: usize,
    c: &EstimatorState,
    sigma: f64,
    alpha: f64,
    set: &UncertaintySet,
) -> Result<ConfidenceRegion> {
    if t == 0 {
        return Err(Error::Domain("confidence interval needs t >= 1".into()));
    }
    let half = case1_half_width(t, sigma, alpha)?;
    let (mu_lo, mu_hi) = set.mu_bounds();
    let mut lo = (c.c_mu - half).max(mu_lo);
    let mut hi = (c.c_mu + half).min(mu_hi);
    if lo > hi {
        let centre = c.c_mu.clamp(mu_lo, mu_hi);
        lo = centre;
        hi = centre;
    }
    let sigma2 = match *set {
        UncertaintySet::MeanOnly { sigma2, .. } => sigma2,
        UncertaintySet::MeanVariance { .. } => sigma * sigma,
    };
    Ok(ConfidenceRegion::Interval { lo, hi, sigma2 })
}

/// Pre-clip half-width `(sigma / sqrt t) Phi^{-1}(1 - alpha/2)`.
pub fn case1_half_width(t: usize, sigma: f64, alpha: f64) -> Result<f64> {
    let q = two_sided_normal_critical(alpha)?;
    Ok(sigma / (t as f64).sqrt() * q)
}

/// Chi-square ellipse around `(c', c'')` intersected with the rectangle.
pub fn region_case2(t: usize, c: &EstimatorState, alpha: f64, set: &UncertaintySet) -> Result<ConfidenceRegion> {
    if t == 0 {
        return Err(Error::Domain("confidence ellipse needs t >= 1".into()));
    }
    if !(c.c_sigma2 > 0.0) {
        return Err(Error::Domain("ellipse centre needs a positive variance".into()));
    }
    let kappa = chi2_2_upper_quantile(alpha)?;
    let tf = t as f64;
    let s = c.c_sigma2;
    let mu_weight = tf / s;
    let sigma2_weight = tf / (2.0 * s * s);
    // widened by the boundary slack so boundary points pass the box test
    let mu_half = (kappa / mu_weight).sqrt() * (1.0 + BOUNDARY_SLACK);
    let s_half = (kappa / sigma2_weight).sqrt() * (1.0 + BOUNDARY_SLACK);
    let (mu_lo, mu_hi) = set.mu_bounds();
    let (s_lo, s_hi) = set.sigma2_bounds();
    Ok(ConfidenceRegion::Ellipse {
        center: c.theta(),
        mu_weight,
        sigma2_weight,
        kappa,
        mu_lo: (c.c_mu - mu_half).max(mu_lo).min(mu_hi),
        mu_hi: (c.c_mu + mu_half).min(mu_hi).max(mu_lo),
        sigma2_lo: (s - s_half).max(s_lo).min(s_hi),
        sigma2_hi: (s + s_half).min(s_hi).max(s_lo),
    })
}

/// The adaptive region `tau(t, c)`: whole rectangle at `t = 0`, otherwise the
/// interval or ellipse matching the set.
pub fn adaptive_region(t: usize, c: &EstimatorState, alpha: f64, set: &UncertaintySet) -> Result<ConfidenceRegion> {
    if t == 0 {
        return Ok(full_region(set));
    }
    match *set {
        UncertaintySet::MeanOnly { sigma2, .. } => region_case1(t, c, sigma2.sqrt(), alpha, set),
        UncertaintySet::MeanVariance { .. } => region_case2(t, c, alpha, set),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo == hi || n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// Uniform grid over a region. Intervals give `resolution` points including
/// both ends; two-dimensional regions give a `resolution x resolution` grid on
/// the bounding box (filtered by ellipse membership), and ellipses always
/// carry their projected centre so the list is never empty.
pub fn enumerate_region(region: &ConfidenceRegion, resolution: usize) -> Result<Vec<ThetaPoint>> {
    if resolution < 2 {
        return Err(Error::Domain(format!(
            "grid resolution must be at least 2, got {resolution}"
        )));
    }
    let points = match *region {
        ConfidenceRegion::Interval { lo, hi, sigma2 } => linspace(lo, hi, resolution)
            .into_iter()
            .map(|mu| ThetaPoint { mu, sigma2 })
            .collect(),
        ConfidenceRegion::Rectangle {
            mu_lo,
            mu_hi,
            sigma2_lo,
            sigma2_hi,
        } => {
            let sig = linspace(sigma2_lo, sigma2_hi, resolution);
            linspace(mu_lo, mu_hi, resolution)
                .into_iter()
                .flat_map(|mu| sig.iter().map(move |&sigma2| ThetaPoint { mu, sigma2 }))
                .collect()
        }
        ConfidenceRegion::Ellipse {
            center,
            mu_lo,
            mu_hi,
            sigma2_lo,
            sigma2_hi,
            ..
        } => {
            let sig = linspace(sigma2_lo, sigma2_hi, resolution);
            let mut pts: Vec<ThetaPoint> = linspace(mu_lo, mu_hi, resolution)
                .into_iter()
                .flat_map(|mu| sig.iter().map(move |&sigma2| ThetaPoint { mu, sigma2 }))
                .filter(|p| region.contains(p))
                .collect();
            let centre = ThetaPoint {
                mu: center.mu.clamp(mu_lo, mu_hi),
                sigma2: center.sigma2.clamp(sigma2_lo, sigma2_hi),
            };
            if !pts.contains(&centre) {
                pts.push(centre);
            }
            pts
        }
    };
    Ok(points)
}
