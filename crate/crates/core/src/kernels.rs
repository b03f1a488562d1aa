//! Gaussian-process covariance matrices for the choice-model factors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial diagonal jitter for [`stabilized_cholesky`].
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_CAP: f64 = 1e-4;

const SYMMETRY_TOL: f64 = 1e-10;

/// Hyperparameters of the spatial (diffusion) and temporal (squared-exponential) kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    /// Diffusion scale on the station graph.
    pub alpha: f64,
    /// Temporal lengthscale in interval units.
    pub lengthscale: f64,
    /// Temporal kernel variance.
    pub variance: f64,
    /// Jitter cap used when factorizing the kernels.
    pub jitter_cap: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lengthscale: 3.0,
            variance: 1.0,
            jitter_cap: JITTER_CAP,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lengthscale", self.lengthscale),
            ("variance", self.variance),
            ("jitter_cap", self.jitter_cap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("kernel {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A symmetric covariance matrix with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub jitter: f64,
}

impl KernelMatrix {
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        Self::with_jitter_cap(values, JITTER_CAP)
    }

    pub fn with_jitter_cap(values: DMatrix<f64>, cap: f64) -> Result<Self> {
        check_symmetric(&values)?;
        let (chol, jitter) = cholesky_with_jitter(&values, JITTER_START, cap)?;
        Ok(Self {
            values,
            chol,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Draws `chol · ξ` with `ξ` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.chol * xi
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Parameter(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Diffusion kernel `expm(-alpha * L_norm)` with the normalized Laplacian
/// `L_norm = D^{-1/2} (D - J) D^{-1/2}`, evaluated by symmetric
/// eigendecomposition.
pub fn diffusion_kernel(adjacency: &DMatrix<f64>, alpha: f64) -> Result<KernelMatrix> {
    diffusion_kernel_with_cap(adjacency, alpha, JITTER_CAP)
}

pub fn diffusion_kernel_with_cap(adjacency: &DMatrix<f64>, alpha: f64, cap: f64) -> Result<KernelMatrix> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("diffusion alpha must be >= 0, got {alpha}")));
    }
    check_symmetric(adjacency)?;
    let n = adjacency.nrows();
    if adjacency.iter().any(|&v| v < 0.0) {
        return Err(Error::Parameter("adjacency has negative entries".into()));
    }
    if (0..n).any(|i| adjacency[(i, i)] != 0.0) {
        return Err(Error::Parameter("adjacency has a non-zero diagonal".into()));
    }
    let degree: Vec<f64> = (0..n).map(|i| adjacency.row(i).sum()).collect();
    if let Some(i) = degree.iter().position(|&d| d <= 0.0) {
        return Err(Error::Parameter(format!(
            "vertex {i} is isolated; the normalized Laplacian is undefined"
        )));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| d.sqrt().recip()).collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let dj = if i == j { degree[i] } else { 0.0 };
        (dj - adjacency[(i, j)]) * inv_sqrt[i] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(laplacian);
    let scaled = eig.eigenvalues.map(|lambda| (-alpha * lambda).exp());
    let mut values = &eig.eigenvectors * DMatrix::from_diagonal(&scaled) * eig.eigenvectors.transpose();
    values = (&values + values.transpose()) * 0.5;
    KernelMatrix::with_jitter_cap(values, cap)
}

/// Squared-exponential kernel on interval indices `1..=t_len`.
pub fn se_kernel(t_len: usize, params: &KernelParams) -> Result<KernelMatrix> {
    params.validate()?;
    if t_len == 0 {
        return Err(Error::Parameter("temporal kernel needs at least one interval".into()));
    }
    let l2 = params.lengthscale * params.lengthscale;
    let values = DMatrix::from_fn(t_len, t_len, |i, j| {
        let d = i as f64 - j as f64;
        params.variance * (-d * d / (2.0 * l2)).exp()
    });
    KernelMatrix::with_jitter_cap(values, params.jitter_cap)
}

/// Lower Cholesky factor of `K + jitter·I`, escalating the jitter from 1e-10
/// by factors of ten up to 1e-4.
pub fn stabilized_cholesky(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    check_symmetric(k)?;
    cholesky_with_jitter(k, JITTER_START, JITTER_CAP)
}

/// Same escalation schedule with an explicit start and cap.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, start: f64, cap: f64) -> Result<(DMatrix<f64>, f64)> {
    if !k.is_square() {
        return Err(Error::Dimension("cholesky of a non-square matrix".into()));
    }
    let mut jitter = start;
    loop {
        let mut shifted = k.clone();
        for i in 0..k.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return Ok((ch.l(), jitter));
        }
        if jitter >= cap * (1.0 - 1e-12) {
            return Err(Error::NotPositiveDefinite { cap });
        }
        jitter = (jitter * 10.0).min(cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn path_graph(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 })
    }

    #[test]
    fn alpha_zero_gives_identity() {
        let k = diffusion_kernel(&path_graph(5), 0.0).unwrap();
        assert!((k.values.clone() - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn two_node_graph_matches_closed_form() {
        // L_norm = [[1,-1],[-1,1]] has eigenvalues {0, 2} with eigenvectors
        // (1,1)/sqrt2 and (1,-1)/sqrt2.
        let alpha = 0.2;
        let k = diffusion_kernel(&path_graph(2), alpha).unwrap();
        let e = (-2.0 * alpha).exp();
        let diag = 0.5 * (1.0 + e);
        let off = 0.5 * (1.0 - e);
        assert!((k.values[(0, 0)] - diag).abs() < 1e-12);
        assert!((k.values[(1, 1)] - diag).abs() < 1e-12);
        assert!((k.values[(0, 1)] - off).abs() < 1e-12);
    }

    #[test]
    fn diffusion_eigenvalues_in_unit_interval() {
        let adj = DMatrix::from_fn(6, 6, |i, j| {
            if i != j && ((i + j) % 3 == 0 || i.abs_diff(j) == 1) {
                1.0
            } else {
                0.0
            }
        });
        let k = diffusion_kernel(&adj, 0.7).unwrap();
        let eig = SymmetricEigen::new(k.values.clone());
        for &l in eig.eigenvalues.iter() {
            assert!(l > 0.0 && l <= 1.0 + 1e-12, "eigenvalue {l}");
        }
    }

    #[test]
    fn isolated_vertex_is_an_error() {
        let mut adj = path_graph(3);
        adj[(1, 2)] = 0.0;
        adj[(2, 1)] = 0.0;
        assert!(diffusion_kernel(&adj, 0.2).is_err());
    }

    #[test]
    fn se_kernel_entries() {
        let p = KernelParams {
            variance: 2.5,
            ..Default::default()
        };
        let k = se_kernel(10, &p).unwrap();
        for i in 0..10 {
            assert_eq!(k.values[(i, i)], 2.5);
        }
        let unit = se_kernel(10, &KernelParams::default()).unwrap();
        assert!((unit.values[(0, 3)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((unit.values[(0, 3)] - 0.606531).abs() < 1e-6);
        for d in 1..9 {
            assert!(unit.values[(0, d)] <= unit.values[(0, d - 1)]);
        }
    }

    #[test]
    fn cholesky_of_identity() {
        let (l, jitter) = stabilized_cholesky(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(jitter, 1e-10);
        assert!((l - DMatrix::identity(4, 4) * (1.0f64 + 1e-10).sqrt()).amax() < 1e-15);
    }

    #[test]
    fn cholesky_of_rank_deficient_ones() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let (l, jitter) = stabilized_cholesky(&k).unwrap();
        // closed form for [[1+j, 1], [1, 1+j]]
        let a = (1.0 + jitter).sqrt();
        let b = 1.0 / a;
        let c = ((1.0 + jitter) - b * b).sqrt();
        assert!((l[(0, 0)] - a).abs() < 1e-12);
        assert!((l[(1, 0)] - b).abs() < 1e-12);
        assert!((l[(1, 1)] - c).abs() < 1e-6);
        assert!(jitter <= 1e-4);
        let rec = &l * l.transpose();
        assert!((rec - &k).amax() <= 2.0 * jitter);
    }

    #[test]
    fn se_kernel_paper_size_factorizes() {
        let k = se_kernel(32, &KernelParams::default()).unwrap();
        let shifted = &k.values + DMatrix::identity(32, 32) * k.jitter;
        assert!(rel_frobenius(&(&k.chol * k.chol.transpose()), &shifted) <= 1e-8);
    }

    #[test]
    fn not_positive_definite_errors() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            stabilized_cholesky(&k),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
