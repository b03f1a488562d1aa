//! Spatiotemporal multinomial-logit path choice.
//!
//! The in-vehicle and transfer sensitivities `Θ` and `Φ` (both stations ×
//! intervals) are the two slices of a 2 × n × T coefficient tensor with a
//! baseline plus a rank-R CP factorization:
//!
//! ```text
//! Θ[o,t] = q1 + Σ_r U[0,r] V[o,r] W[t,r]
//! Φ[o,t] = q2 + Σ_r U[1,r] V[o,r] W[t,r]
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CostKind, NetworkModel, Path, PathSet};

/// Baseline effects and CP factors of the coefficient tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceTensor {
    /// 2 × R (choice-type mode).
    pub u: DMatrix<f64>,
    /// n × R (station mode).
    pub v: DMatrix<f64>,
    /// T × R (time mode).
    pub w: DMatrix<f64>,
    pub q1: f64,
    pub q2: f64,
}

/// Reconstructed coefficient fields, each n × T.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

impl ChoiceTensor {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, w: DMatrix<f64>, q1: f64, q2: f64) -> Result<Self> {
        let ct = Self { u, v, w, q1, q2 };
        ct.check()?;
        Ok(ct)
    }

    /// Baseline-only tensor (all factors zero).
    pub fn zeros(n: usize, t_len: usize, rank: usize) -> Self {
        Self {
            u: DMatrix::zeros(2, rank),
            v: DMatrix::zeros(n, rank),
            w: DMatrix::zeros(t_len, rank),
            q1: 0.0,
            q2: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let r = self.u.ncols();
        if self.u.nrows() != 2 {
            return Err(Error::Dimension(format!("U must have 2 rows, got {}", self.u.nrows())));
        }
        if self.v.ncols() != r || self.w.ncols() != r {
            return Err(Error::Dimension(format!(
                "factor ranks disagree: U has {r}, V has {}, W has {}",
                self.v.ncols(),
                self.w.ncols()
            )));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_stations(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_intervals(&self) -> usize {
        self.w.nrows()
    }

    /// `(θ_ot, φ_ot)` without reconstructing the whole tensor.
    #[inline]
    pub fn coefficient_at(&self, o: usize, t: usize) -> (f64, f64) {
        let mut theta = self.q1;
        let mut phi = self.q2;
        for r in 0..self.rank() {
            let vw = self.v[(o, r)] * self.w[(t, r)];
            theta += self.u[(0, r)] * vw;
            phi += self.u[(1, r)] * vw;
        }
        (theta, phi)
    }

    /// Mode-1 unfolding `F_(1) = Q_(1) + U (W ⊙ V)ᵀ`, a 2 × nT matrix whose
    /// rows are `vec(Θ)ᵀ` and `vec(Φ)ᵀ` (column-major vec).
    pub fn mode1_unfolding(&self) -> Result<DMatrix<f64>> {
        self.check()?;
        let kr = khatri_rao(&self.w, &self.v)?;
        let mut f = &self.u * kr.transpose();
        for j in 0..f.ncols() {
            f[(0, j)] += self.q1;
            f[(1, j)] += self.q2;
        }
        Ok(f)
    }
}

/// Column-wise Kronecker product: column r is `a[:,r] ⊗ b[:,r]`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "Khatri-Rao operands have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let (ra, rb) = (a.nrows(), b.nrows());
    Ok(DMatrix::from_fn(ra * rb, a.ncols(), |i, r| a[(i / rb, r)] * b[(i % rb, r)]))
}

/// Reconstructs `Θ` and `Φ` from the baseline and factors.
pub fn reconstruct_coefficients(ct: &ChoiceTensor) -> Result<Coefficients> {
    ct.check()?;
    let (n, t_len) = (ct.n_stations(), ct.n_intervals());
    let mut theta = DMatrix::from_element(n, t_len, ct.q1);
    let mut phi = DMatrix::from_element(n, t_len, ct.q2);
    if ct.rank() > 0 {
        let scaled_theta = DMatrix::from_fn(n, ct.rank(), |o, r| ct.v[(o, r)] * ct.u[(0, r)]);
        let scaled_phi = DMatrix::from_fn(n, ct.rank(), |o, r| ct.v[(o, r)] * ct.u[(1, r)]);
        theta += scaled_theta * ct.w.transpose();
        phi += scaled_phi * ct.w.transpose();
    }
    Ok(Coefficients { theta, phi })
}

/// Per-path attribute sums entering the utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityContext {
    /// Σ of in-vehicle costs along the path (seconds).
    pub invehicle_sum: f64,
    /// Σ of transfer costs along the path (seconds).
    pub transfer_sum: f64,
}

impl UtilityContext {
    pub fn for_path(path: &Path, x_t: &[f64], net: &NetworkModel) -> Self {
        let inv = net.block_range(CostKind::InVehicle).start;
        let tr = net.block_range(CostKind::Transfer).start;
        Self {
            invehicle_sum: path.rides().map(|l| x_t[inv + l]).sum(),
            transfer_sum: path.transfers().map(|t| x_t[tr + t]).sum(),
        }
    }

    #[inline]
    pub fn utility(&self, theta: f64, phi: f64) -> f64 {
        theta * self.invehicle_sum + phi * self.transfer_sum
    }
}

/// Deterministic utilities `θ·Σ in-vehicle + φ·Σ transfer` for every path.
/// Access and egress costs do not enter.
pub fn path_utilities(x_t: &[f64], paths: &PathSet, net: &NetworkModel, theta: f64, phi: f64) -> Vec<f64> {
    paths
        .paths
        .iter()
        .map(|p| UtilityContext::for_path(p, x_t, net).utility(theta, phi))
        .collect()
}

/// Log-softmax of utilities (max-shifted).
pub fn log_choice_probabilities(utilities: &[f64]) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(Error::Empty("choice set is empty".into()));
    }
    if let Some(u) = utilities.iter().find(|u| !u.is_finite()) {
        return Err(Error::Parameter(format!("non-finite utility {u}")));
    }
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + utilities.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
    Ok(utilities.iter().map(|u| u - lse).collect())
}

/// Multinomial-logit probabilities via log-sum-exp.
pub fn choice_probabilities(utilities: &[f64]) -> Result<Vec<f64>> {
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if utilities.is_empty() {
        return Err(Error::Empty("choice set is empty".into()));
    }
    if let Some(u) = utilities.iter().find(|u| !u.is_finite()) {
        return Err(Error::Parameter(format!("non-finite utility {u}")));
    }
    let weights: Vec<f64> = utilities.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Restrictions of the full model used as benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Constant `θ = q1`, `φ = q2` (V and W frozen at zero).
    Static,
    /// Station-varying only (W frozen at ones).
    Spatial,
    /// Interval-varying only (V frozen at ones).
    Temporal,
    /// Full station × interval variation.
    #[default]
    Spatiotemporal,
}

impl ModelVariant {
    pub fn samples_v(self) -> bool {
        matches!(self, ModelVariant::Spatial | ModelVariant::Spatiotemporal)
    }

    pub fn samples_w(self) -> bool {
        matches!(self, ModelVariant::Temporal | ModelVariant::Spatiotemporal)
    }

    pub fn samples_u(self) -> bool {
        self != ModelVariant::Static
    }

    /// Overwrites frozen factor modes with their fixed values.
    pub fn apply(self, ct: &mut ChoiceTensor) {
        match self {
            ModelVariant::Static => {
                ct.v.fill(0.0);
                ct.w.fill(0.0);
            }
            ModelVariant::Spatial => ct.w.fill(1.0),
            ModelVariant::Temporal => ct.v.fill(1.0),
            ModelVariant::Spatiotemporal => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, t: usize, r: usize) -> ChoiceTensor {
        let mut g = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let (u, v, w) = (g(2, r), g(n, r), g(t, r));
        ChoiceTensor::new(u, v, w, -0.2, -0.4).unwrap()
    }

    #[test]
    fn rank_zero_is_baseline() {
        let mut ct = ChoiceTensor::zeros(4, 3, 0);
        ct.q1 = -0.2;
        ct.q2 = -0.4;
        let c = reconstruct_coefficients(&ct).unwrap();
        assert!(c.theta.iter().all(|&v| v == -0.2));
        assert!(c.phi.iter().all(|&v| v == -0.4));
    }

    #[test]
    fn rank_one_outer_product() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let w = DMatrix::from_column_slice(2, 1, &[0.5, -1.0]);
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let ct = ChoiceTensor::new(u, v.clone(), w.clone(), 0.0, 0.0).unwrap();
        let c = reconstruct_coefficients(&ct).unwrap();
        assert_eq!(c.theta, &v * w.transpose());
        assert!(c.phi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ct = random_tensor(&mut rng, 7, 5, 4);
        let c = reconstruct_coefficients(&ct).unwrap();
        for o in 0..7 {
            for t in 0..5 {
                let mut th = ct.q1;
                let mut ph = ct.q2;
                for r in 0..4 {
                    th += ct.u[(0, r)] * ct.v[(o, r)] * ct.w[(t, r)];
                    ph += ct.u[(1, r)] * ct.v[(o, r)] * ct.w[(t, r)];
                }
                assert!((c.theta[(o, t)] - th).abs() < 1e-12);
                assert!((c.phi[(o, t)] - ph).abs() < 1e-12);
                let (a, b) = ct.coefficient_at(o, t);
                assert!((a - th).abs() < 1e-12 && (b - ph).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode1_unfolding_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ct = random_tensor(&mut rng, 6, 4, 3);
        let f = ct.mode1_unfolding().unwrap();
        let c = reconstruct_coefficients(&ct).unwrap();
        for t in 0..4 {
            for o in 0..6 {
                let j = o + 6 * t;
                assert!((f[(0, j)] - c.theta[(o, t)]).abs() < 1e-10);
                assert!((f[(1, j)] - c.phi[(o, t)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let r = ChoiceTensor::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(4, 2),
            0.0,
            0.0,
        );
        assert!(r.is_err());
        assert!(ChoiceTensor::new(DMatrix::zeros(3, 1), DMatrix::zeros(3, 1), DMatrix::zeros(4, 1), 0.0, 0.0).is_err());
    }

    #[test]
    fn utility_examples() {
        let ctx = UtilityContext {
            invehicle_sum: 600.0,
            transfer_sum: 120.0,
        };
        assert_eq!(ctx.utility(0.0, 0.0), 0.0);
        assert!((ctx.utility(-0.2, -0.4) - -168.0).abs() < 1e-12);
        let direct = UtilityContext {
            invehicle_sum: 431.0,
            transfer_sum: 0.0,
        };
        assert_eq!(direct.utility(-0.37, -5.0), -0.37 * 431.0);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(choice_probabilities(&[3.7]).unwrap(), vec![1.0]);
        assert_eq!(choice_probabilities(&[-2.0, -2.0]).unwrap(), vec![0.5, 0.5]);
        let p = choice_probabilities(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(choice_probabilities(&[0.0, f64::NAN]).is_err());
        assert!(choice_probabilities(&[]).is_err());
    }

    #[test]
    fn extreme_utilities_stay_positive() {
        let p = choice_probabilities(&[-1000.0, -1030.0]).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_choice_probabilities(&[-1000.0, -1030.0]).unwrap();
        assert!((lp[1] - (-30.0 - (1.0 + (-30f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn static_variant_reduces_to_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ct = random_tensor(&mut rng, 5, 4, 2);
        ModelVariant::Static.apply(&mut ct);
        let c = reconstruct_coefficients(&ct).unwrap();
        assert!(c.theta.iter().all(|&v| v == ct.q1));
        assert!(c.phi.iter().all(|&v| v == ct.q2));
    }

    #[test]
    fn restricted_variants_vary_along_one_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ct = random_tensor(&mut rng, 5, 4, 2);
        ModelVariant::Spatial.apply(&mut ct);
        let c = reconstruct_coefficients(&ct).unwrap();
        for o in 0..5 {
            assert!((1..4).all(|t| (c.theta[(o, t)] - c.theta[(o, 0)]).abs() < 1e-12));
        }
        let mut ct = random_tensor(&mut rng, 5, 4, 2);
        ModelVariant::Temporal.apply(&mut ct);
        let c = reconstruct_coefficients(&ct).unwrap();
        for t in 0..4 {
            assert!((1..5).all(|o| (c.phi[(o, t)] - c.phi[(0, t)]).abs() < 1e-12));
        }
    }
}
