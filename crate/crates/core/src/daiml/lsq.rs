//! Closed-form least-squares adaptation of the linear coefficients and its
//! reverse-mode derivative.
//!
//! The residual force is modelled as `f ≈ blockdiag(φ, φ, φ) · [a_x; a_y; a_z]`
//! with a shared `h`-dimensional basis `φ(x)`. Each axis is an independent
//! ridge problem `(Φ Φᵀ + δ I) a_j = Φ y_j` sharing one Gram matrix, where `Φ`
//! holds one basis column per sample.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::scalar::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LsError {
    #[error("least squares needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("basis has {basis} samples but labels have {labels}")]
    BatchMismatch { basis: usize, labels: usize },
    #[error("labels must have 3 rows, got {0}")]
    LabelWidth(usize),
    #[error("Gram matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Adapted coefficients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSolution<T: Real> {
    /// `[a_x; a_y; a_z]`, length `3h`.
    pub a_star: DVector<T>,
    /// Smallest singular value of the basis matrix of the batch.
    pub conditioning: T,
}

impl<T: Real> AdaptSolution<T> {
    pub fn basis_dim(&self) -> usize {
        self.a_star.len() / 3
    }

    /// Coefficients as an `h × 3` matrix, one column per force axis.
    pub fn coeffs(&self) -> DMatrix<T> {
        DMatrix::from_column_slice(self.basis_dim(), 3, self.a_star.as_slice())
    }

    /// Predicted forces `3 × n` for basis columns `phi` (`h × n`).
    pub fn predict(&self, phi: &DMatrix<T>) -> DMatrix<T> {
        self.coeffs().tr_mul(phi)
    }
}

/// Forward record of one adaptation, kept for [`LsAdaptation::backward`].
#[derive(Debug, Clone)]
pub struct LsAdaptation<T: Real> {
    pub solution: AdaptSolution<T>,
    /// Uncapped solution, `h × 3`.
    raw: DMatrix<T>,
    raw_norm: T,
    capped: bool,
    gram: Cholesky<T, Dyn>,
    phi: DMatrix<T>,
    labels: DMatrix<T>,
    gamma: Option<T>,
}

/// Solves the damped least-squares adaptation and applies the norm cap
/// `a* ← γ a*/‖a*‖` when `‖a*‖ > γ`.
///
/// `phi` is `h × n` (one basis column per sample), `labels` is `3 × n`.
pub fn least_squares_adapt<T: Real>(
    phi: &DMatrix<T>,
    labels: &DMatrix<T>,
    damping: T,
    gamma: Option<T>,
) -> Result<LsAdaptation<T>, LsError> {
    let (h, n) = phi.shape();
    if labels.nrows() != 3 {
        return Err(LsError::LabelWidth(labels.nrows()));
    }
    if labels.ncols() != n {
        return Err(LsError::BatchMismatch {
            basis: n,
            labels: labels.ncols(),
        });
    }
    if n < h.max(1) {
        return Err(LsError::TooFewSamples {
            needed: h.max(1),
            got: n,
        });
    }
    let plain = phi * phi.transpose();
    let mut gram = plain.clone();
    for i in 0..h {
        gram[(i, i)] += damping;
    }
    let chol = gram.cholesky().ok_or(LsError::NotPositiveDefinite)?;
    // Φ Yᵀ is h × 3
    let rhs = phi * labels.transpose();
    let raw = chol.solve(&rhs);
    let raw_norm = raw.norm();
    let mut a = raw.clone();
    let mut capped = false;
    if let Some(g) = gamma {
        if raw_norm > g {
            a *= g / raw_norm;
            capped = true;
        }
    }
    let min_eig = plain.symmetric_eigenvalues().min().max(T::zero());
    Ok(LsAdaptation {
        solution: AdaptSolution {
            a_star: DVector::from_column_slice(a.as_slice()),
            conditioning: min_eig.sqrt(),
        },
        raw,
        raw_norm,
        capped,
        gram: chol,
        phi: phi.clone(),
        labels: labels.clone(),
        gamma,
    })
}

impl<T: Real> LsAdaptation<T> {
    pub fn capped(&self) -> bool {
        self.capped
    }

    pub fn raw_norm(&self) -> T {
        self.raw_norm
    }

    /// Pulls a gradient on the returned coefficients (`h × 3`) back to the
    /// basis matrix (`h × n`) of the adaptation batch.
    ///
    /// The cap is differentiated as the projection `a ↦ γ a/‖a‖`; the solve
    /// by implicit differentiation of the damped normal equations:
    /// `∂L/∂Φ = Σ_j λ_j r_jᵀ − a_j (Φᵀ λ_j)ᵀ`, `λ_j = G⁻¹ ∂L/∂a_j`,
    /// `r_j = y_j − Φᵀ a_j`.
    pub fn backward(&self, grad_a: &DMatrix<T>) -> DMatrix<T> {
        let mut g = grad_a.clone();
        if self.capped {
            let gamma = self.gamma.expect("cap implies gamma");
            let dir = &self.raw / self.raw_norm;
            let radial = dir.dot(&g);
            g = (g - dir * radial) * (gamma / self.raw_norm);
        }
        let lambda = self.gram.solve(&g);
        // residuals on the adaptation batch, n × 3
        let resid = self.labels.transpose() - self.phi.tr_mul(&self.raw);
        let phi_t_lambda = self.phi.tr_mul(&lambda);
        &lambda * resid.transpose() - &self.raw * phi_t_lambda.transpose()
    }
}
