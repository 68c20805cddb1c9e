//! Gaussian-process surrogates over the augmented state.
//!
//! A fitted model predicts `m + k(x, X) [K + eps^2 I]^{-1} (y - m)` with an
//! anisotropic Matérn-5/2 kernel evaluated on standardized inputs. `m` is the
//! target mean when centring is enabled and zero otherwise; the predictor is
//! linear in the target vector either way. Hyperparameters maximize the log
//! marginal likelihood through coordinate-wise golden-section sweeps started
//! from a fixed list of seeds.

mod kernel;
mod linalg;

pub use kernel::{matern52, KernelParams, DEFAULT_NUGGET};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernel::matern52_profile;
use linalg::{cholesky_in_place, cholesky_solve, residual_inf};

/// Serialization format version of [`SurrogateModel`].
pub const SURROGATE_FORMAT_VERSION: u32 = 1;

/// Accepted relative residual of the weight solve, `||(K + eps^2 I) w - y||_inf / ||y||_inf`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Controls for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub nugget: f64,
    /// Largest nugget tried before giving up (the nugget grows tenfold per retry).
    pub max_nugget: f64,
    pub center_targets: bool,
    /// Length-scale box in standardized input units.
    pub length_scale_bounds: (f64, f64),
    /// Signal-variance box as multiples of the target variance.
    pub signal_variance_bounds: (f64, f64),
    /// When set, `eps^2` joins the search as a noise variance in this box
    /// (multiples of the target variance) and `nugget` becomes its floor.
    #[serde(default)]
    pub noise_variance_bounds: Option<(f64, f64)>,
    pub start_seeds: Vec<u64>,
    pub sweeps: usize,
    /// Golden-section stopping width, in log units.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nugget: DEFAULT_NUGGET,
            max_nugget: 1e-2,
            center_targets: true,
            length_scale_bounds: (1e-2, 1e2),
            signal_variance_bounds: (1e-4, 1e2),
            noise_variance_bounds: None,
            start_seeds: vec![1, 2, 3, 4, 5],
            sweeps: 3,
            tolerance: 0.05,
        }
    }
}

/// Search trace recorded by [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitDiagnostics {
    /// Log marginal likelihood at each multi-start point before any sweep;
    /// `None` where the covariance was rejected.
    pub start_lml: Vec<Option<f64>>,
    pub final_lml: Option<f64>,
    /// Likelihood evaluations spent.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModelKind {
    Gp,
    /// Constant targets: the model returns the constant.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SurrogateRecord {
    version: u32,
    kind: ModelKind,
    dim: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// Standardized training inputs, row-major `n x dim`.
    inputs: Vec<f64>,
    targets: Vec<f64>,
    offset: f64,
    params: KernelParams,
    weights: Vec<f64>,
    diagnostics: FitDiagnostics,
}

/// A fitted GP regression surrogate. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SurrogateRecord", into = "SurrogateRecord")]
pub struct SurrogateModel {
    record: SurrogateRecord,
    /// Standardized inputs divided by the length scales, used by `predict`.
    scaled: Vec<f64>,
    /// Per-dimension factor mapping raw query coordinates into `scaled` space.
    query_scale: Vec<f64>,
    /// First column of `scaled`, contiguous for the split predictor.
    first: Vec<f64>,
}

impl From<SurrogateModel> for SurrogateRecord {
    fn from(m: SurrogateModel) -> Self {
        m.record
    }
}

impl TryFrom<SurrogateRecord> for SurrogateModel {
    type Error = String;

    fn try_from(record: SurrogateRecord) -> std::result::Result<Self, String> {
        if record.version != SURROGATE_FORMAT_VERSION {
            return Err(format!("unsupported surrogate format version {}", record.version));
        }
        let n = record.targets.len();
        if record.inputs.len() != n * record.dim
            || record.shift.len() != record.dim
            || record.scale.len() != record.dim
            || (record.kind == ModelKind::Gp && record.weights.len() != n)
            || record.params.length_scales.len() != record.dim
        {
            return Err("inconsistent surrogate dimensions".into());
        }
        Ok(SurrogateModel::from_record(record))
    }
}

impl SurrogateModel {
    fn from_record(record: SurrogateRecord) -> Self {
        let dim = record.dim;
        let inv_l: Vec<f64> = record.params.length_scales.iter().map(|l| 1.0 / l).collect();
        let scaled: Vec<f64> = record
            .inputs
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&inv_l).map(|(x, il)| x * il).collect::<Vec<_>>())
            .collect();
        let query_scale = record.scale.iter().zip(&inv_l).map(|(s, il)| il / s).collect();
        let first = scaled.iter().step_by(dim).copied().collect();
        SurrogateModel {
            record,
            scaled,
            query_scale,
            first,
        }
    }

    pub fn dim(&self) -> usize {
        self.record.dim
    }

    pub fn len(&self) -> usize {
        self.record.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record.targets.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.record.kind == ModelKind::Constant
    }

    /// Hyperparameters in standardized input units.
    pub fn params(&self) -> &KernelParams {
        &self.record.params
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.record.diagnostics
    }

    pub fn targets(&self) -> &[f64] {
        &self.record.targets
    }

    /// Constant offset added to the kernel expansion.
    pub fn offset(&self) -> f64 {
        self.record.offset
    }

    /// Weights `[K + eps^2 I]^{-1} (y - offset)`.
    pub fn weights(&self) -> &[f64] {
        &self.record.weights
    }

    /// Per-dimension `(shift, scale)` standardization constants.
    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.record.shift, &self.record.scale)
    }

    /// Maps a raw input into the standardized coordinates used by the kernel.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.record.shift)
            .zip(&self.record.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Point prediction at a raw input.
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let r = &self.record;
        if r.kind == ModelKind::Constant {
            return r.offset;
        }
        debug_assert_eq!(x.len(), r.dim);
        let mut acc = 0.0;
        match r.dim {
            2 => {
                let q0 = (x[0] - r.shift[0]) * self.query_scale[0];
                let q1 = (x[1] - r.shift[1]) * self.query_scale[1];
                for (row, w) in self.scaled.chunks_exact(2).zip(&r.weights) {
                    let a = q0 - row[0];
                    let b = q1 - row[1];
                    acc += w * matern52_profile(a * a + b * b);
                }
            }
            3 => {
                let q0 = (x[0] - r.shift[0]) * self.query_scale[0];
                let q1 = (x[1] - r.shift[1]) * self.query_scale[1];
                let q2 = (x[2] - r.shift[2]) * self.query_scale[2];
                for (row, w) in self.scaled.chunks_exact(3).zip(&r.weights) {
                    let a = q0 - row[0];
                    let b = q1 - row[1];
                    let c = q2 - row[2];
                    acc += w * matern52_profile(a * a + b * b + c * c);
                }
            }
            d => {
                let q: Vec<f64> = (0..d).map(|k| (x[k] - r.shift[k]) * self.query_scale[k]).collect();
                for (row, w) in self.scaled.chunks_exact(d).zip(&r.weights) {
                    let d2: f64 = row.iter().zip(&q).map(|(s, v)| (v - s) * (v - s)).sum();
                    acc += w * matern52_profile(d2);
                }
            }
        }
        r.offset + r.params.signal_variance * acc
    }

    /// Squared scaled distances from `x` to every training input, ignoring
    /// the first coordinate. Pairs with [`SurrogateModel::predict_split`] when
    /// many queries share everything but the first coordinate.
    pub fn tail_distances(&self, x: &[f64], out: &mut Vec<f64>) {
        let r = &self.record;
        out.clear();
        if r.kind == ModelKind::Constant {
            return;
        }
        let d = r.dim;
        if d == 1 {
            out.resize(self.first.len(), 0.0);
            return;
        }
        let q: [f64; 2] = [
            (x[1] - r.shift[1]) * self.query_scale[1],
            if d > 2 {
                (x[2] - r.shift[2]) * self.query_scale[2]
            } else {
                0.0
            },
        ];
        if d <= 3 {
            out.extend(self.scaled.chunks_exact(d).map(|row| {
                let b = q[0] - row[1];
                let mut d2 = b * b;
                if d == 3 {
                    let c = q[1] - row[2];
                    d2 += c * c;
                }
                d2
            }));
        } else {
            out.extend(self.scaled.chunks_exact(d).map(|row| {
                (1..d)
                    .map(|k| {
                        let u = (x[k] - r.shift[k]) * self.query_scale[k] - row[k];
                        u * u
                    })
                    .sum::<f64>()
            }));
        }
    }

    /// Prediction at `(x0, rest)` where `tail` came from `tail_distances(rest)`.
    #[inline]
    pub fn predict_split(&self, x0: f64, tail: &[f64]) -> f64 {
        let r = &self.record;
        if r.kind == ModelKind::Constant {
            return r.offset;
        }
        let q0 = (x0 - r.shift[0]) * self.query_scale[0];
        // four independent partial sums let the loop pipeline
        let mut acc = [0.0; 4];
        let first = self.first.chunks_exact(4);
        let tails = tail.chunks_exact(4);
        let weights = r.weights.chunks_exact(4);
        let rest = first.remainder().iter().zip(tails.remainder()).zip(weights.remainder());
        for ((s, t), w) in first.zip(tails).zip(weights) {
            for l in 0..4 {
                let a = q0 - s[l];
                acc[l] += w[l] * matern52_profile(a * a + t[l]);
            }
        }
        let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for ((s, t), w) in rest {
            let a = q0 - s;
            total += w * matern52_profile(a * a + t);
        }
        r.offset + r.params.signal_variance * total
    }

    /// Log marginal likelihood of the stored training data at the stored hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let r = &self.record;
        if r.kind == ModelKind::Constant {
            return f64::INFINITY;
        }
        let centred: Vec<f64> = r.targets.iter().map(|y| y - r.offset).collect();
        lml(&r.inputs, r.dim, &centred, &r.params)
            .map(|e| e.lml)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Builds a model at fixed hyperparameters (given in standardized units).
    /// The nugget still escalates if the factorization fails.
    pub fn with_params(
        inputs: &[Vec<f64>],
        targets: &[f64],
        params: KernelParams,
        options: &FitOptions,
    ) -> Result<Self> {
        let data = TrainingData::new(inputs, targets, options.center_targets)?;
        if data.is_constant() {
            return Ok(data.constant_model(params));
        }
        data.finish(params, options, FitDiagnostics::default())
    }
}

struct TrainingData {
    dim: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    standardized: Vec<f64>,
    targets: Vec<f64>,
    offset: f64,
    centred: Vec<f64>,
}

impl TrainingData {
    fn new(inputs: &[Vec<f64>], targets: &[f64], center: bool) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Domain(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.len() < 2 {
            return Err(Error::Domain("GP fit needs at least two training points".into()));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Domain("GP targets must be finite".into()));
        }
        let dim = inputs[0].len();
        if dim == 0
            || inputs
                .iter()
                .any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Domain(
                "GP inputs must be finite vectors of one common dimension".into(),
            ));
        }
        let n = inputs.len() as f64;
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for k in 0..dim {
            let mean = inputs.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            shift[k] = mean;
            let sd = var.sqrt();
            scale[k] = if sd > 1e-12 * mean.abs().max(1e-300) { sd } else { 1.0 };
        }
        let standardized = inputs
            .iter()
            .flat_map(|x| (0..dim).map(|k| (x[k] - shift[k]) / scale[k]).collect::<Vec<_>>())
            .collect();
        let offset = if center { targets.iter().sum::<f64>() / n } else { 0.0 };
        let centred = targets.iter().map(|y| y - offset).collect();
        Ok(Self {
            dim,
            shift,
            scale,
            standardized,
            targets: targets.to_vec(),
            offset,
            centred,
        })
    }

    fn is_constant(&self) -> bool {
        let first = self.targets[0];
        self.targets.iter().all(|y| *y == first)
    }

    /// Variance scale used for the signal-variance box.
    fn target_scale(&self) -> f64 {
        let n = self.centred.len() as f64;
        let m = self.centred.iter().sum::<f64>() / n;
        self.centred.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n + if self.offset == 0.0 { m * m } else { 0.0 }
    }

    fn constant_model(self, params: KernelParams) -> SurrogateModel {
        let value = self.targets[0];
        SurrogateModel::from_record(SurrogateRecord {
            version: SURROGATE_FORMAT_VERSION,
            kind: ModelKind::Constant,
            dim: self.dim,
            shift: self.shift,
            scale: self.scale,
            inputs: self.standardized,
            targets: self.targets,
            offset: value,
            params,
            weights: Vec::new(),
            diagnostics: FitDiagnostics::default(),
        })
    }

    fn finish(
        self,
        mut params: KernelParams,
        options: &FitOptions,
        mut diagnostics: FitDiagnostics,
    ) -> Result<SurrogateModel> {
        let n = self.targets.len();
        let mut nugget = params.nugget;
        let mut last_reason;
        loop {
            params.nugget = nugget;
            match solve_weights(&self.standardized, self.dim, &self.centred, &params) {
                Ok(weights) => {
                    if diagnostics.final_lml.is_none() {
                        diagnostics.final_lml =
                            lml(&self.standardized, self.dim, &self.centred, &params).map(|e| e.lml);
                    }
                    return Ok(SurrogateModel::from_record(SurrogateRecord {
                        version: SURROGATE_FORMAT_VERSION,
                        kind: ModelKind::Gp,
                        dim: self.dim,
                        shift: self.shift,
                        scale: self.scale,
                        inputs: self.standardized,
                        targets: self.targets,
                        offset: self.offset,
                        params,
                        weights,
                        diagnostics,
                    }));
                }
                Err(reason) => last_reason = reason,
            }
            nugget *= 10.0;
            if nugget > options.max_nugget * (1.0 + 1e-12) {
                break;
            }
            diagnostics.final_lml = None;
        }
        Err(Error::Factorization {
            context: String::new(),
            reason: format!("{last_reason} (n={n}, nugget escalated to {})", options.max_nugget),
        })
    }
}

fn covariance(inputs: &[f64], dim: usize, params: &KernelParams) -> Vec<f64> {
    let n = inputs.len() / dim;
    let inv_l: Vec<f64> = params.length_scales.iter().map(|l| 1.0 / l).collect();
    let mut k = vec![0.0; n * n];
    let jitter = params.nugget * params.nugget;
    for i in 0..n {
        let xi = &inputs[i * dim..(i + 1) * dim];
        k[i * n + i] = params.signal_variance + jitter;
        for j in 0..i {
            let xj = &inputs[j * dim..(j + 1) * dim];
            let mut d2 = 0.0;
            for d in 0..dim {
                let u = (xi[d] - xj[d]) * inv_l[d];
                d2 += u * u;
            }
            let v = params.signal_variance * matern52_profile(d2);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn solve_weights(
    inputs: &[f64],
    dim: usize,
    y: &[f64],
    params: &KernelParams,
) -> std::result::Result<Vec<f64>, String> {
    let n = y.len();
    let k = covariance(inputs, dim, params);
    let mut l = k.clone();
    if !cholesky_in_place(&mut l, n) {
        return Err("covariance is not positive definite".into());
    }
    let w = cholesky_solve(&l, n, y);
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let res = residual_inf(&k, n, &w, y);
    if !(res <= RESIDUAL_TOLERANCE * scale) {
        return Err(format!("solve residual {res:.3e} exceeds tolerance"));
    }
    Ok(w)
}

struct LmlEval {
    lml: f64,
}

fn lml(inputs: &[f64], dim: usize, y: &[f64], params: &KernelParams) -> Option<LmlEval> {
    let n = y.len();
    let k = covariance(inputs, dim, params);
    let mut l = k.clone();
    if !cholesky_in_place(&mut l, n) {
        return None;
    }
    let alpha = cholesky_solve(&l, n, y);
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if !(residual_inf(&k, n, &alpha, y) <= RESIDUAL_TOLERANCE * scale) {
        return None;
    }
    let quad: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
    let value = -0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    value.is_finite().then_some(LmlEval { lml: value })
}

/// Fits a surrogate by maximizing the log marginal likelihood.
pub fn fit(inputs: &[Vec<f64>], targets: &[f64], options: &FitOptions) -> Result<SurrogateModel> {
    let data = TrainingData::new(inputs, targets, options.center_targets)?;
    let dim = data.dim;
    if data.is_constant() {
        return Ok(data.constant_model(KernelParams::new(1.0, vec![1.0; dim])));
    }
    let var = data.target_scale();
    let bounds = SearchBox::new(dim, var, options);
    let mut diagnostics = FitDiagnostics::default();
    let mut objective = |v: &[f64]| -> f64 {
        diagnostics.evaluations += 1;
        let params = bounds.params(v, options.nugget);
        lml(&data.standardized, dim, &data.centred, &params)
            .map(|e| e.lml)
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_lml = Vec::with_capacity(options.start_seeds.len());
    for &seed in &options.start_seeds {
        let mut point = bounds.start(seed);
        let mut value = objective(&point);
        start_lml.push(value.is_finite().then_some(value));
        for _ in 0..options.sweeps {
            let before = value;
            for coord in 0..point.len() {
                let (lo, hi) = bounds.range(coord);
                let (x, fx) = golden_section(lo, hi, options.tolerance, |x| {
                    let mut trial = point.clone();
                    trial[coord] = x;
                    objective(&trial)
                });
                if fx > value {
                    point[coord] = x;
                    value = fx;
                }
            }
            if value - before <= 1e-6 * value.abs().max(1.0) {
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((point, value));
        }
    }
    diagnostics.start_lml = start_lml;
    let (point, value) = best.expect("at least one multi-start seed");
    let params = if value.is_finite() {
        diagnostics.final_lml = Some(value);
        bounds.params(&point, options.nugget)
    } else {
        // every likelihood evaluation failed; fall back to the unit start and let
        // the nugget escalation decide
        bounds.params(&bounds.centre(), options.nugget)
    };
    data.finish(params, options, diagnostics).map_err(|e| match e {
        Error::Factorization { context, reason } => Error::Factorization {
            context,
            reason: format!("{reason}; best log-likelihood {value}"),
        },
        other => other,
    })
}

/// Search box over `(ln sigma_f^2, ln l_1, ..., ln l_d)`, optionally followed by `ln eps^2`.
struct SearchBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    dim: usize,
}

impl SearchBox {
    fn new(dim: usize, var: f64, options: &FitOptions) -> Self {
        let var = var.max(f64::MIN_POSITIVE);
        let (sl, sh) = options.signal_variance_bounds;
        let (ll, lh) = options.length_scale_bounds;
        let mut lo = vec![(sl * var).ln()];
        let mut hi = vec![(sh * var).ln()];
        lo.extend(std::iter::repeat_n(ll.ln(), dim));
        hi.extend(std::iter::repeat_n(lh.ln(), dim));
        if let Some((nl, nh)) = options.noise_variance_bounds {
            let floor = (options.nugget * options.nugget).ln();
            lo.push((nl * var).ln().max(floor));
            hi.push((nh * var).ln().max(floor));
        }
        Self { lo, hi, dim }
    }

    fn range(&self, coord: usize) -> (f64, f64) {
        (self.lo[coord], self.hi[coord])
    }

    fn start(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| rng.random_range(*l..=*h))
            .collect()
    }

    fn centre(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    fn params(&self, v: &[f64], nugget: f64) -> KernelParams {
        KernelParams {
            signal_variance: v[0].exp(),
            length_scales: v[1..=self.dim].iter().map(|x| x.exp()).collect(),
            nugget: v.get(self.dim + 1).map_or(nugget, |ln_eps2| (0.5 * ln_eps2).exp()),
        }
    }
}

/// Maximizes `f` on `[lo, hi]`; returns the best point visited.
fn golden_section(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = if f2 > f1 { (x2, f2) } else { (x1, f1) };
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
            if f1 > best.1 {
                best = (x1, f1);
            }
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
            if f2 > best.1 {
                best = (x2, f2);
            }
        }
    }
    best
}
