//! Linear-Gaussian state-space core.
//!
//! Observation of one trip on path `k` at interval `t`:
//!
//! ```text
//! y ~ N(A_k · x_t, A_k · (x_t ∘ σ)²)
//! ```
//!
//! State evolution is a random walk `x_t ~ N(x_{t-1}, diag(τ²))` with
//! `x_1 ~ N(m0, P0)`. The forward filter works in information form so that
//! the per-interval update costs O(c³) regardless of how many trips were
//! observed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::cholesky_with_jitter;
use crate::network::{CostKind, NetworkModel, RoutingRow};

/// Costs are clamped to this floor (seconds) inside variance computations.
pub const VARIANCE_FLOOR_S: f64 = 1.0;

/// Coefficients of variation, one per cost kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub access: f64,
    pub invehicle: f64,
    pub transfer: f64,
    pub egress: f64,
}

impl NoiseScale {
    pub fn new(access: f64, invehicle: f64, transfer: f64, egress: f64) -> Result<Self> {
        Self::from_array([access, invehicle, transfer, egress])
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::Parameter(format!(
                "{} coefficient of variation must be positive, got {x}",
                CostKind::ALL[i].label()
            )));
        }
        Ok(Self {
            access: v[0],
            invehicle: v[1],
            transfer: v[2],
            egress: v[3],
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.access, self.invehicle, self.transfer, self.egress]
    }

    pub fn get(&self, kind: CostKind) -> f64 {
        self.as_array()[kind.index()]
    }

    pub fn set(&mut self, kind: CostKind, value: f64) {
        match kind {
            CostKind::Access => self.access = value,
            CostKind::InVehicle => self.invehicle = value,
            CostKind::Transfer => self.transfer = value,
            CostKind::Egress => self.egress = value,
        }
    }

    /// Length-c vector `(σ_a·1_l, σ_h·1_l, σ_u·1_s, σ_e·1_n)`.
    pub fn expand(&self, net: &NetworkModel) -> DVector<f64> {
        let mut out = DVector::zeros(net.cost_dim());
        for kind in CostKind::ALL {
            for i in net.block_range(kind) {
                out[i] = self.get(kind);
            }
        }
        out
    }
}

/// Per-kind sums of clamped squared costs along a routing row. The trip
/// variance is `Σ_k σ_k² · sums[k]`.
pub fn kind_square_sums(x_t: &[f64], row: &RoutingRow, net: &NetworkModel) -> [f64; 4] {
    let mut sums = [0.0; 4];
    for &j in row.cols() {
        let x = x_t[j].max(VARIANCE_FLOOR_S);
        sums[net.kind_of(j).index()] += x * x;
    }
    sums
}

#[inline]
pub fn variance_from_sums(sums: &[f64; 4], sigma: &NoiseScale) -> f64 {
    let s = sigma.as_array();
    (0..4).map(|k| s[k] * s[k] * sums[k]).sum()
}

/// Heteroscedastic trip variance `row · (max(x_t, 1s) ∘ σ)²`.
pub fn observation_variance(x_t: &[f64], sigma: &NoiseScale, row: &RoutingRow, net: &NetworkModel) -> f64 {
    variance_from_sums(&kind_square_sums(x_t, row, net), sigma)
}

/// Gaussian log-density of one travel time given its path and the costs.
pub fn trip_loglik(y: f64, x_t: &[f64], sigma: &NoiseScale, row: &RoutingRow, net: &NetworkModel) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Parameter(format!("non-finite travel time {y}")));
    }
    let var = observation_variance(x_t, sigma, row, net);
    Ok(gaussian_logpdf(y, row.dot(x_t), var))
}

#[inline]
pub fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// Random-walk and initial-state parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StateParams {
    pub tau2: DVector<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl StateParams {
    pub fn new(tau2: DVector<f64>, m0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let c = m0.len();
        if tau2.len() != c || p0.nrows() != c || p0.ncols() != c {
            return Err(Error::Dimension(format!(
                "state parameters disagree: m0 {c}, tau2 {}, P0 {}x{}",
                tau2.len(),
                p0.nrows(),
                p0.ncols()
            )));
        }
        if tau2.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("process noise tau2 must be strictly positive".into()));
        }
        if (&p0 - p0.transpose()).amax() > 1e-10 * p0.amax().max(1.0) || p0.clone().cholesky().is_none() {
            return Err(Error::Parameter("P0 must be symmetric positive definite".into()));
        }
        Ok(Self { tau2, m0, p0 })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }
}

/// Accumulated measurement information `(AᵀΣ⁻¹A, AᵀΣ⁻¹y)` of one interval.
#[derive(Debug, Clone)]
pub struct IntervalInfo {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
    pub count: usize,
}

impl IntervalInfo {
    pub fn new(c: usize) -> Self {
        Self {
            precision: DMatrix::zeros(c, c),
            shift: DVector::zeros(c),
            count: 0,
        }
    }

    /// Adds `count` observations sharing one routing row and variance, with
    /// travel times summing to `sum_y`.
    pub fn add(&mut self, row: &RoutingRow, variance: f64, count: usize, sum_y: f64) {
        if count == 0 {
            return;
        }
        let w = count as f64 / variance;
        let cols = row.cols();
        for &i in cols {
            for &j in cols {
                self.precision[(i, j)] += w;
            }
            self.shift[i] += sum_y / variance;
        }
        self.count += count;
    }

    pub fn add_one(&mut self, row: &RoutingRow, variance: f64, y: f64) {
        self.add(row, variance, 1, y);
    }
}

/// Forward-pass moments for every interval.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub mu_pred: Vec<DVector<f64>>,
    pub p_pred: Vec<DMatrix<f64>>,
    pub mu_filt: Vec<DVector<f64>>,
    pub p_filt: Vec<DMatrix<f64>>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Cholesky of a covariance, retrying with jitter scaled to its diagonal.
pub(crate) fn covariance_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let scale = (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / m.nrows().max(1) as f64).max(1e-300);
    cholesky_with_jitter(m, 1e-10 * scale, 1e-4 * scale).map(|(l, _)| l)
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = covariance_cholesky(m)?;
    let n = m.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite { cap: 0.0 })?;
    let mut inv = linv.transpose() * linv;
    symmetrize(&mut inv);
    Ok(inv)
}

/// Information-form forward filter. Intervals without observations reduce to
/// a pure prediction step.
pub fn forward_filter(params: &StateParams, infos: &[IntervalInfo]) -> Result<FilterState> {
    let c = params.dim();
    let t_len = infos.len();
    if t_len == 0 {
        return Err(Error::Empty("no intervals to filter".into()));
    }
    let mut fs = FilterState {
        mu_pred: Vec::with_capacity(t_len),
        p_pred: Vec::with_capacity(t_len),
        mu_filt: Vec::with_capacity(t_len),
        p_filt: Vec::with_capacity(t_len),
    };
    for (t, info) in infos.iter().enumerate() {
        if info.precision.nrows() != c || info.shift.len() != c {
            return Err(Error::Dimension(format!("interval {t} information has the wrong size")));
        }
        let (mu_pred, p_pred) = if t == 0 {
            (params.m0.clone(), params.p0.clone())
        } else {
            let mut p = fs.p_filt[t - 1].clone();
            for i in 0..c {
                p[(i, i)] += params.tau2[i];
            }
            (fs.mu_filt[t - 1].clone(), p)
        };
        let (mu_filt, p_filt) = if info.count == 0 {
            (mu_pred.clone(), p_pred.clone())
        } else {
            let mut precision = spd_inverse(&p_pred)?;
            precision += &info.precision;
            let mut p_filt = spd_inverse(&precision)?;
            symmetrize(&mut p_filt);
            let innovation = &info.shift - &info.precision * &mu_pred;
            let mu_filt = &mu_pred + &p_filt * innovation;
            (mu_filt, p_filt)
        };
        fs.mu_pred.push(mu_pred);
        fs.p_pred.push(p_pred);
        fs.mu_filt.push(mu_filt);
        fs.p_filt.push(p_filt);
    }
    Ok(fs)
}

/// Smoothing gain `J_t = P_{t|t} P_{t+1|t}⁻¹`.
fn smoothing_gain(p_filt: &DMatrix<f64>, p_pred_next: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = covariance_cholesky(p_pred_next)?;
    // J = P_f P⁻¹  ⇔  Jᵀ = P⁻¹ P_f (both symmetric)
    let half = l
        .solve_lower_triangular(p_filt)
        .ok_or(Error::NotPositiveDefinite { cap: 0.0 })?;
    let jt = l
        .tr_solve_lower_triangular(&half)
        .ok_or(Error::NotPositiveDefinite { cap: 0.0 })?;
    Ok(jt.transpose())
}

fn draw_gaussian<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let l = covariance_cholesky(cov)?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + l * z)
}

/// Backward sampling pass: `x_T ~ N(μ_{T|T}, P_{T|T})`, then
/// `x_t ~ N(μ_{t|t} + J_t(x_{t+1} − μ_{t+1|t}), P_{t|t} − J_t P_{t+1|t} J_tᵀ)`.
pub fn backward_sample<R: Rng + ?Sized>(fs: &FilterState, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let t_len = fs.mu_filt.len();
    let mut out = vec![DVector::zeros(0); t_len];
    out[t_len - 1] = draw_gaussian(&fs.mu_filt[t_len - 1], &fs.p_filt[t_len - 1], rng)?;
    for t in (0..t_len - 1).rev() {
        let j = smoothing_gain(&fs.p_filt[t], &fs.p_pred[t + 1])?;
        let mean = &fs.mu_filt[t] + &j * (&out[t + 1] - &fs.mu_pred[t + 1]);
        // J P_{t+1|t} Jᵀ = P_{t|t} Jᵀ
        let mut cov = &fs.p_filt[t] - &fs.p_filt[t] * j.transpose();
        symmetrize(&mut cov);
        out[t] = draw_gaussian(&mean, &cov, rng)?;
    }
    Ok(out)
}

/// Draws a full cost trajectory from its conditional posterior.
pub fn ffbs_sample<R: Rng + ?Sized>(params: &StateParams, infos: &[IntervalInfo], rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let fs = forward_filter(params, infos)?;
    backward_sample(&fs, rng)
}

/// Per-interval means and covariances.
pub type Moments = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Rauch–Tung–Striebel smoothed means and covariances.
pub fn rts_smooth(fs: &FilterState) -> Result<Moments> {
    let t_len = fs.mu_filt.len();
    let mut means = fs.mu_filt.clone();
    let mut covs = fs.p_filt.clone();
    for t in (0..t_len.saturating_sub(1)).rev() {
        let j = smoothing_gain(&fs.p_filt[t], &fs.p_pred[t + 1])?;
        means[t] = &fs.mu_filt[t] + &j * (&means[t + 1] - &fs.mu_pred[t + 1]);
        let mut cov = &fs.p_filt[t] + &j * (&covs[t + 1] - &fs.p_pred[t + 1]) * j.transpose();
        symmetrize(&mut cov);
        covs[t] = cov;
    }
    Ok((means, covs))
}

/// Kalman gain through the information form,
/// `K = (P⁻¹ + AᵀΣ⁻¹A)⁻¹ AᵀΣ⁻¹`, for a dense `A` and diagonal `Σ`.
pub fn information_gain(p_pred: &DMatrix<f64>, a: &DMatrix<f64>, obs_var: &[f64]) -> Result<DMatrix<f64>> {
    if a.nrows() != obs_var.len() || a.ncols() != p_pred.nrows() {
        return Err(Error::Dimension("gain operands disagree".into()));
    }
    let mut at_sinv = a.transpose();
    for (j, v) in obs_var.iter().enumerate() {
        at_sinv.column_mut(j).scale_mut(1.0 / v);
    }
    let precision = spd_inverse(p_pred)? + &at_sinv * a;
    Ok(spd_inverse(&precision)? * at_sinv)
}
