//! MCMC building blocks: scalar slice sampling, elliptical slice sampling,
//! the conjugate inverse-Wishart draw, the collapsed (path-marginalized)
//! choice likelihood and categorical path-choice sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceTensor, UtilityContext};
use crate::error::{Error, Result};
use crate::rng::keyed_uniform;

/// Bracket width and shrink cap for [`slice_sample_scalar`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub epsilon: f64,
    pub max_shrink: usize,
}

impl SliceConfig {
    pub fn new(epsilon: f64, max_shrink: usize) -> Result<Self> {
        let cfg = Self { epsilon, max_shrink };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("slice width must be positive, got {}", self.epsilon)));
        }
        if self.max_shrink == 0 {
            return Err(Error::Parameter("slice shrink cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of one slice-sampling update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceDraw {
    pub value: f64,
    /// Log-density at `value`.
    pub logpost: f64,
    pub evaluations: usize,
    /// Shrink cap hit; `value` is the unchanged current point.
    pub fell_back: bool,
}

/// One slice-sampling update with a randomly positioned bracket of width
/// `epsilon` around the current point and shrinkage toward it (no stepping out).
pub fn slice_sample_scalar<F, R>(current: f64, mut logpost: F, cfg: &SliceConfig, rng: &mut R) -> Result<SliceDraw>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let current_lp = logpost(current);
    if !current_lp.is_finite() {
        return Err(Error::Parameter(format!(
            "slice sampler started at a point with log-density {current_lp}"
        )));
    }
    let threshold = current_lp + rng.random::<f64>().ln();
    let kappa = rng.random::<f64>() * cfg.epsilon;
    let mut lo = current - kappa;
    let mut hi = lo + cfg.epsilon;
    for shrink in 0..cfg.max_shrink {
        let proposal = lo + rng.random::<f64>() * (hi - lo);
        let lp = logpost(proposal);
        if lp > threshold {
            return Ok(SliceDraw {
                value: proposal,
                logpost: lp,
                evaluations: shrink + 2,
                fell_back: false,
            });
        }
        if proposal < current {
            lo = proposal;
        } else {
            hi = proposal;
        }
    }
    Ok(SliceDraw {
        value: current,
        logpost: current_lp,
        evaluations: cfg.max_shrink + 1,
        fell_back: true,
    })
}

/// Current point of an elliptical slice update and the Cholesky factor of
/// its zero-mean Gaussian prior.
#[derive(Debug, Clone)]
pub struct EllipseState<'a> {
    pub current: DVector<f64>,
    pub prior_chol: &'a DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EssDraw {
    pub value: DVector<f64>,
    pub loglik: f64,
    pub evaluations: usize,
}

/// Bracket shrinks before the update gives up and keeps the current point.
const ESS_MAX_SHRINK: usize = 500;

/// Point on the ellipse through `current` and `nu` at angle `phi`.
#[inline]
pub fn ellipse_point(current: &DVector<f64>, nu: &DVector<f64>, phi: f64) -> DVector<f64> {
    current * phi.cos() + nu * phi.sin()
}

/// One elliptical slice sampling update.
pub fn ess_sample<F, R>(state: &EllipseState<'_>, mut loglik: F, rng: &mut R) -> Result<EssDraw>
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    let current_ll = loglik(&state.current);
    ess_sample_from(state, current_ll, loglik, rng)
}

/// [`ess_sample`] with the log-likelihood at the current point supplied.
pub fn ess_sample_from<F, R>(state: &EllipseState<'_>, current_ll: f64, mut loglik: F, rng: &mut R) -> Result<EssDraw>
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    let dim = state.current.len();
    if state.prior_chol.nrows() != dim || state.prior_chol.ncols() != dim {
        return Err(Error::Dimension(format!(
            "ellipse state has dimension {dim} but the prior factor is {}x{}",
            state.prior_chol.nrows(),
            state.prior_chol.ncols()
        )));
    }
    if !current_ll.is_finite() {
        return Err(Error::Parameter(format!(
            "elliptical slice sampler started at a point with log-likelihood {current_ll}"
        )));
    }
    let xi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nu = state.prior_chol * xi;
    let threshold = current_ll + rng.random::<f64>().ln();
    let mut phi = rng.random::<f64>() * std::f64::consts::TAU;
    let mut lo = phi - std::f64::consts::TAU;
    let mut hi = phi;
    for evals in 1..=ESS_MAX_SHRINK {
        let proposal = ellipse_point(&state.current, &nu, phi);
        let ll = loglik(&proposal);
        if ll > threshold {
            return Ok(EssDraw {
                value: proposal,
                loglik: ll,
                evaluations: evals + 1,
            });
        }
        if phi <= 0.0 {
            lo = phi;
        } else {
            hi = phi;
        }
        phi = lo + rng.random::<f64>() * (hi - lo);
    }
    log::warn!("elliptical slice sampler hit its shrink cap; keeping the current point");
    Ok(EssDraw {
        value: state.current.clone(),
        loglik: current_ll,
        evaluations: ESS_MAX_SHRINK + 1,
    })
}

/// Draw from the inverse Wishart `W⁻¹(scale, dof)` via the Bartlett
/// decomposition of the Wishart with scale `scale⁻¹`.
pub fn inverse_wishart_sample<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !scale.is_square() || p == 0 {
        return Err(Error::Dimension("inverse-Wishart scale must be square".into()));
    }
    if dof.is_nan() || dof <= (p as f64) - 1.0 {
        return Err(Error::Parameter(format!(
            "inverse-Wishart degrees of freedom {dof} must exceed {}",
            p - 1
        )));
    }
    let scale_chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Parameter("inverse-Wishart scale is not positive definite".into()))?;
    let scale_inv = scale_chol.inverse();
    let l = scale_inv
        .cholesky()
        .ok_or_else(|| Error::Parameter("inverse-Wishart scale is ill-conditioned".into()))?
        .l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::Parameter(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    let mut k = wishart
        .cholesky()
        .ok_or_else(|| Error::Parameter("Wishart draw is singular".into()))?
        .inverse();
    let kt = k.transpose();
    k = (k + kt) * 0.5;
    Ok(k)
}

/// Conjugate update of the choice-type factor covariance:
/// `K_U | U ~ W⁻¹(Ω0 + UUᵀ, ν0 + R)`.
pub fn sample_ku<R: Rng + ?Sized>(u: &DMatrix<f64>, omega0: &DMatrix<f64>, nu0: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if u.nrows() != omega0.nrows() {
        return Err(Error::Dimension(format!(
            "U has {} rows but the scale matrix is {}x{}",
            u.nrows(),
            omega0.nrows(),
            omega0.ncols()
        )));
    }
    if omega0.clone().cholesky().is_none() {
        return Err(Error::Parameter("inverse-Wishart prior scale is not positive definite".into()));
    }
    let scale = omega0 + u * u.transpose();
    inverse_wishart_sample(&scale, nu0 + u.ncols() as f64, rng)
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Trips of one (O-D, interval) cell that share a choice set.
#[derive(Debug, Clone)]
pub struct MixtureCell {
    pub origin: usize,
    pub interval: usize,
    /// Utility attributes per path at the current costs.
    pub contexts: Vec<UtilityContext>,
    /// Index of the cell's first trip in the global trip order.
    pub first_trip: usize,
    /// `log N(y_m; μ_k, v_k)`, trip-major (`n_trips × n_paths`).
    pub log_dens: Vec<f64>,
}

impl MixtureCell {
    pub fn n_paths(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_trips(&self) -> usize {
        self.log_dens.len() / self.n_paths().max(1)
    }

    /// Log MNL probabilities of the paths under the tensor's coefficients.
    pub fn log_choice_probs(&self, tensor: &ChoiceTensor, out: &mut Vec<f64>) {
        let (theta, phi) = tensor.coefficient_at(self.origin, self.interval);
        out.clear();
        out.extend(self.contexts.iter().map(|c| c.utility(theta, phi)));
        let lse = log_sum_exp(out.iter().copied());
        for v in out.iter_mut() {
            *v -= lse;
        }
    }
}

/// Choice-model log-likelihood with the path choices summed out:
/// `Σ_trips log Σ_k p_k N(y; μ_k, v_k)` over cells with two or more paths.
pub fn collapsed_loglik(cells: &[MixtureCell], tensor: &ChoiceTensor) -> f64 {
    let mut total = 0.0;
    let mut used = false;
    let mut logp = Vec::new();
    for cell in cells.iter().filter(|c| c.n_paths() > 1) {
        used = true;
        cell.log_choice_probs(tensor, &mut logp);
        let k = cell.n_paths();
        for dens in cell.log_dens.chunks_exact(k) {
            total += log_sum_exp(dens.iter().zip(&logp).map(|(d, p)| d + p));
        }
    }
    if !used {
        log::warn!("no O-D pair has more than one path; choice parameters are unidentified");
    }
    total
}

/// Normalized posterior path probabilities `∝ exp(log_dens + log_prior)`.
/// When every density underflows, returns the prior weights and `true`.
pub fn path_posterior(log_dens: &[f64], log_prior: &[f64]) -> (Vec<f64>, bool) {
    let joint: Vec<f64> = log_dens.iter().zip(log_prior).map(|(d, p)| d + p).collect();
    let lse = log_sum_exp(joint.iter().copied());
    if lse.is_finite() {
        (joint.iter().map(|v| (v - lse).exp()).collect(), false)
    } else {
        let lse = log_sum_exp(log_prior.iter().copied());
        (log_prior.iter().map(|v| (v - lse).exp()).collect(), true)
    }
}

/// Inverse-CDF categorical draw from normalized weights and a uniform.
#[inline]
pub fn categorical_from_uniform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Draws every trip's path from its categorical posterior. Each trip's draw
/// uses a uniform keyed by `(seed, iteration, trip)`, so the result does not
/// depend on evaluation order. Single-path cells are assigned path 0.
/// Returns the number of trips that fell back to prior weights.
pub fn sample_path_choices(cells: &[MixtureCell], tensor: &ChoiceTensor, seed: u64, iteration: u64, z: &mut [u16]) -> usize {
    let mut fallbacks = 0;
    let mut logp = Vec::new();
    for cell in cells {
        let k = cell.n_paths();
        let trips = cell.first_trip..cell.first_trip + cell.n_trips();
        if k == 1 {
            z[trips].fill(0);
            continue;
        }
        cell.log_choice_probs(tensor, &mut logp);
        for (m, dens) in trips.zip(cell.log_dens.chunks_exact(k)) {
            let (probs, fell_back) = path_posterior(dens, &logp);
            if fell_back {
                fallbacks += 1;
            }
            let u = keyed_uniform(seed, &[iteration, m as u64]);
            z[m] = categorical_from_uniform(&probs, u) as u16;
        }
    }
    if fallbacks > 0 {
        log::debug!("{fallbacks} trips fell back to prior path weights");
    }
    fallbacks
}
