//! Posterior with Gaussian likelihood and Gaussian-mixture prior.
//!
//! The potential is
//! `J(x) = ½‖H(x) − y‖²_{R⁻¹} − log Σ_i τ_i |Σ_i|^{-1/2} exp(−½‖x − μ_i‖²_{Σ_i⁻¹})`.

use crate::error::{check_dim, Result};
use crate::forward::ForwardOperator;
use crate::gmm::{log_sum_exp, softmax, GaussianMixture};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};

/// A target density `∝ exp(−U(x))` as seen by the samplers.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn potential(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.potential(x)?, self.gradient(x)?))
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    prior: GaussianMixture,
    operator: ForwardOperator,
    y: Vec<f64>,
    obs_cov: SpdMatrix,
    obs_factor: CholeskyFactor,
}

impl PosteriorModel {
    pub fn new(
        prior: GaussianMixture,
        operator: ForwardOperator,
        y: Vec<f64>,
        obs_cov: SpdMatrix,
    ) -> Result<Self> {
        check_dim(prior.dim(), operator.in_dim())?;
        check_dim(operator.out_dim(), y.len())?;
        check_dim(y.len(), obs_cov.order())?;
        let obs_factor = cholesky(&obs_cov)?;
        Ok(Self { prior, operator, y, obs_cov, obs_factor })
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.operator
    }

    pub fn observation(&self) -> &[f64] {
        &self.y
    }

    pub fn obs_cov(&self) -> &SpdMatrix {
        &self.obs_cov
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `‖H(x) − y‖²_{R⁻¹}` and, optionally, `R⁻¹(H(x) − y)`.
    fn misfit(&self, x: &[f64], want_weighted: bool) -> Result<(f64, Option<Vec<f64>>)> {
        check_dim(self.dim(), x.len())?;
        let r: Vec<f64> = self.operator.apply(x)?.iter().zip(&self.y).map(|(h, y)| h - y).collect();
        let w = self.obs_factor.solve_lower(&r)?;
        let q = w.iter().map(|a| a * a).sum();
        let weighted = if want_weighted { Some(self.obs_factor.solve_upper(&w)?) } else { None };
        Ok((q, weighted))
    }

    /// Gaussian log-likelihood including its normalising constant.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let (q, _) = self.misfit(x, false)?;
        let m = self.y.len() as f64;
        Ok(-0.5 * q - 0.5 * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.obs_factor.log_det())
    }

    pub fn neg_log_posterior(&self, x: &[f64]) -> Result<f64> {
        let (q, _) = self.misfit(x, false)?;
        let terms = self.prior.component_log_terms(x)?;
        Ok(0.5 * q - log_sum_exp(&terms))
    }

    pub fn unnormalized_log_posterior(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.neg_log_posterior(x)?)
    }

    /// Prior component responsibilities `w_i(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.prior.responsibilities(x)
    }

    pub fn grad_neg_log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(x)?.1)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (q, weighted) = self.misfit(x, true)?;
        let mut g = self.operator.adjoint_jacobian_apply(x, &weighted.expect("requested"))?;
        let (terms, residuals) = self.prior.component_terms_with_precision_residuals(x)?;
        let w = softmax(&terms);
        for (wi, ri) in w.iter().zip(&residuals) {
            for (gk, rk) in g.iter_mut().zip(ri) {
                *gk += wi * rk;
            }
        }
        Ok((0.5 * q - log_sum_exp(&terms), g))
    }
}

impl Potential for PosteriorModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        self.neg_log_posterior(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.grad_neg_log_posterior(x)
    }

    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.value_and_gradient(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{CovarianceStructure, Covariances};

    fn scalar_model(triples: &[(f64, f64, f64)], y: f64, r: f64) -> PosteriorModel {
        PosteriorModel::new(
            GaussianMixture::univariate(triples).unwrap(),
            ForwardOperator::identity(1),
            vec![y],
            SpdMatrix::diagonal(vec![r]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn likelihood_peak_value() {
        let m = scalar_model(&[(1.0, 0.0, 1.0)], -1.0, 2.2);
        let want = -0.5 * (2.0 * std::f64::consts::PI * 2.2).ln();
        assert!((m.log_likelihood(&[-1.0]).unwrap() - want).abs() < 1e-14);
        assert!((want + 1.313_167).abs() < 1e-6);
        assert!(m.log_likelihood(&[-0.5]).unwrap() < want);
    }

    #[test]
    fn likelihood_quadratic_part() {
        let prior = GaussianMixture::new(
            CovarianceStructure::Spherical,
            vec![1.0],
            vec![vec![0.0, 0.0]],
            Covariances::PerComponent(vec![SpdMatrix::spherical(2, 1.0).unwrap()]),
        )
        .unwrap();
        let m = PosteriorModel::new(prior, ForwardOperator::identity(2), vec![0.0, 0.0], SpdMatrix::identity(2))
            .unwrap();
        let c = -(2.0 * std::f64::consts::PI).ln();
        assert!((m.log_likelihood(&[3.0, 4.0]).unwrap() - (-12.5 + c)).abs() < 1e-13);
    }

    #[test]
    fn potential_at_common_point_is_half_log_det() {
        let m = scalar_model(&[(1.0, 0.7, 3.0)], 0.7, 2.0);
        assert!((m.neg_log_posterior(&[0.7]).unwrap() - 0.5 * 3f64.ln()).abs() < 1e-15);
        assert_eq!(m.grad_neg_log_posterior(&[0.7]).unwrap(), vec![0.0]);
    }

    #[test]
    fn log_posterior_is_negated_potential() {
        let m = scalar_model(&[(0.4, -2.0, 0.5), (0.6, 3.0, 1.0)], -1.0, 2.2);
        for x in [-4.0, 0.0, 1.3] {
            assert_eq!(m.unnormalized_log_posterior(&[x]).unwrap(), -m.neg_log_posterior(&[x]).unwrap());
        }
    }

    #[test]
    fn potential_is_coercive() {
        let m = scalar_model(&[(0.4, -2.0, 0.5), (0.6, 3.0, 1.0)], -1.0, 2.2);
        let far = m.neg_log_posterior(&[3.0e6]).unwrap();
        assert!(far.is_finite());
        assert!(far - m.neg_log_posterior(&[-2.0]).unwrap() > 1e6);
    }

    #[test]
    fn symmetric_prior_term_vanishes_at_midpoint() {
        let m = scalar_model(&[(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)], 0.0, 1.0);
        assert!(m.grad_neg_log_posterior(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = scalar_model(&[(0.3, -3.0, 0.5), (0.2, 0.1, 0.05), (0.5, 2.5, 0.2)], -1.0, 2.2);
        for x in [-3.0, 0.0, 2.5, 0.3] {
            let g = m.grad_neg_log_posterior(&[x]).unwrap()[0];
            let h = 1e-5;
            let fd = (m.neg_log_posterior(&[x + h]).unwrap() - m.neg_log_posterior(&[x - h]).unwrap()) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-5 * g.abs().max(1e-8), "x={x}: {g} vs {fd}");
        }
    }
}
