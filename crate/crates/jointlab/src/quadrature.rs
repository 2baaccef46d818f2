//! Gauss–Hermite quadrature and posterior moments of the random effect.
//!
//! Rules use the probabilists' normalization: nodes `x_j` and weights `w_j`
//! satisfy `Σ w_j f(x_j) ≈ E[f(a₀)]` for `a₀ ~ N(0, I)`, so the weights sum
//! to one and no stray `√π` factors appear. Posterior integrals against the
//! complete-data kernel are evaluated in log space with a max shift, with
//! optional adaptive recentering at the closed-form Gaussian posterior.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{self, SubjectEval};
use crate::model::{StepCumHazard, SubjectRecord, ThetaParams};

const LN_2PI: f64 = 1.8378770664093453;

/// Tensor-product probabilists' Gauss–Hermite rule.
#[derive(Debug, Clone)]
pub struct QuadRule {
    dim: usize,
    points_per_dim: usize,
    /// `m^dim × dim` matrix of evaluation points for a standard normal integrand.
    nodes: DMatrix<f64>,
    /// Positive weights, summing to one.
    weights: DVector<f64>,
}

impl QuadRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
}

/// Quadrature configuration shared by the likelihood and EM modules.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub rule: QuadRule,
    /// Recenter the rule at the closed-form Gaussian posterior per subject.
    pub adaptive: bool,
}

impl Quadrature {
    pub fn new(points_per_dim: usize, dim: usize, adaptive: bool) -> Result<Quadrature> {
        Ok(Quadrature {
            rule: gauss_hermite_rule(points_per_dim, dim)?,
            adaptive,
        })
    }
}

/// One-dimensional probabilists' Gauss–Hermite nodes and weights via
/// Golub–Welsch: the Jacobi matrix for the monic recurrence
/// `H_{k+1} = x H_k − k H_{k−1}` is tridiagonal with zero diagonal and
/// off-diagonal `√k`; its eigenvalues are the nodes and the squared first
/// eigenvector components are the weights.
fn gauss_hermite_1d(m: usize) -> (Vec<f64>, Vec<f64>) {
    if m == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jacobi = DMatrix::zeros(m, m);
    for k in 1..m {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let w = eig.eigenvectors[(0, j)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Build the tensor-product rule with `m` points per dimension.
pub fn gauss_hermite_rule(m: usize, dim: usize) -> Result<QuadRule> {
    if m == 0 || m > 64 {
        return Err(Error::Invalid(format!(
            "points per dimension must be in 1..=64, got {m}"
        )));
    }
    if dim == 0 || dim > 4 {
        return Err(Error::Invalid(format!(
            "unsupported dimension {dim}: tensor rules are limited to 1..=4"
        )));
    }
    let (nodes_1d, weights_1d) = gauss_hermite_1d(m);
    let total = m.pow(dim as u32);
    let mut nodes = DMatrix::zeros(total, dim);
    let mut weights = DVector::zeros(total);
    for row in 0..total {
        let mut idx = row;
        let mut w = 1.0;
        for col in 0..dim {
            let j = idx % m;
            idx /= m;
            nodes[(row, col)] = nodes_1d[j];
            w *= weights_1d[j];
        }
        weights[row] = w;
    }
    Ok(QuadRule {
        dim,
        points_per_dim: m,
        nodes,
        weights,
    })
}

/// Affine recentering `a = mean + L b` where `L` is the symmetric square
/// root of `cov`.
#[derive(Debug, Clone)]
pub(crate) struct GaussCenter {
    pub mean: DVector<f64>,
    /// Symmetric factor with `L L = cov`.
    pub sqrt: DMatrix<f64>,
    pub log_det_cov: f64,
}

impl GaussCenter {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<GaussCenter> {
        let eig = cov.clone().symmetric_eigen();
        let mut log_det = 0.0;
        for &lambda in eig.eigenvalues.iter() {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::Parameter(format!(
                    "quadrature centering covariance is not positive definite (eigenvalue {lambda:.3e})"
                )));
            }
            log_det += lambda.ln();
        }
        let d = cov.nrows();
        let mut sqrt = DMatrix::zeros(d, d);
        for j in 0..d {
            let col = eig.eigenvectors.column(j);
            let scale = eig.eigenvalues[j].sqrt();
            for i in 0..d {
                for k in 0..d {
                    sqrt[(i, k)] += scale * col[i] * col[k];
                }
            }
        }
        Ok(GaussCenter {
            mean,
            sqrt,
            log_det_cov: log_det,
        })
    }
}

/// Weighted point cloud representing the posterior of `a` given one
/// subject's data: `E[f(a) | O] ≈ Σ_j weights[j] f(points[j])`.
#[derive(Debug, Clone)]
pub(crate) struct Cloud {
    /// `log ∫ G(a, O; θ, Λ) da`.
    pub log_norm: f64,
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl Cloud {
    pub fn expect<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| w * f(a))
            .sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let d = self.points[0].len();
        let mut m = DVector::zeros(d);
        for (a, w) in self.points.iter().zip(&self.weights) {
            m.axpy(*w, a, 1.0);
        }
        m
    }

    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.points[0].len();
        let mut s = DMatrix::zeros(d, d);
        for (a, w) in self.points.iter().zip(&self.weights) {
            for i in 0..d {
                for j in i..d {
                    s[(i, j)] += w * a[i] * a[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                s[(i, j)] = s[(j, i)];
            }
        }
        s
    }
}

/// Integrate `exp(log_g)` against the rule recentered at `center`, in log
/// space. Returns the cloud of posterior points and normalized weights.
pub(crate) fn cloud_from_log_density<F>(
    rule: &QuadRule,
    center: &GaussCenter,
    log_g: F,
) -> Result<Cloud>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let d = rule.dim();
    let k = rule.len();
    let mut points = Vec::with_capacity(k);
    let mut log_terms = Vec::with_capacity(k);
    let mut max_term = f64::NEG_INFINITY;
    for j in 0..k {
        let x = rule.nodes.row(j).transpose();
        let a = &center.mean + &center.sqrt * &x;
        // log w_j + log g(a_j) − log N(a_j; mean, cov), with
        // log N(a_j; mean, cov) = −d/2 ln 2π − ½ ln|cov| − ½ ‖x_j‖².
        let lt = rule.weights[j].ln()
            + log_g(&a)
            + 0.5 * (d as f64) * LN_2PI
            + 0.5 * center.log_det_cov
            + 0.5 * x.norm_squared();
        if lt > max_term {
            max_term = lt;
        }
        points.push(a);
        log_terms.push(lt);
    }
    if !max_term.is_finite() {
        return Err(Error::Invalid(
            "posterior integrand vanished or diverged at every quadrature node".into(),
        ));
    }
    let mut sum = 0.0;
    let mut weights = Vec::with_capacity(k);
    for lt in &log_terms {
        let w = (lt - max_term).exp();
        weights.push(w);
        sum += w;
    }
    let log_norm = max_term + sum.ln();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(Cloud {
        log_norm,
        points,
        weights,
    })
}

/// Normalizing constant and posterior moments of `a` given one subject.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// `log ∫ G(a, O; θ, Λ) da`.
    pub log_norm: f64,
    /// `E[a | O]`.
    pub mean: DVector<f64>,
    /// `E[a aᵀ | O]`, symmetric.
    pub second_moment: DMatrix<f64>,
    /// Requested scalar functionals `f ↦ E[f(a) | O]`.
    pub extra: BTreeMap<String, f64>,
}

/// Posterior cloud for one subject under `(θ, Λ)`; shared by the public
/// moment computation and the EM sweep.
pub(crate) fn posterior_cloud(
    eval: &SubjectEval,
    theta: &ThetaParams,
    quad: &Quadrature,
) -> Result<Cloud> {
    let center = if quad.adaptive {
        let (mean, cov) = eval.gaussian_posterior();
        GaussCenter::new(mean, &cov)?
    } else {
        GaussCenter::new(DVector::zeros(theta.sigma_a.nrows()), &theta.sigma_a)?
    };
    cloud_from_log_density(&quad.rule, &center, |a| eval.log_g(a))
}

/// Moments of the density proportional to `G(a, O; θ, Λ)`.
pub fn posterior_moments(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    rule: &QuadRule,
    adaptive: bool,
) -> Result<PosteriorSummary> {
    posterior_moments_with(subj, theta, lam, rule, adaptive, &[])
}

/// As [`posterior_moments`], additionally evaluating named scalar
/// functionals of `a` under the posterior.
pub fn posterior_moments_with(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    rule: &QuadRule,
    adaptive: bool,
    extras: &[(&str, &dyn Fn(&DVector<f64>) -> f64)],
) -> Result<PosteriorSummary> {
    likelihood::check_dims(subj, theta)?;
    let quad = Quadrature {
        rule: rule.clone(),
        adaptive,
    };
    let eval = SubjectEval::new(subj, theta, lam)?;
    let cloud = posterior_cloud(&eval, theta, &quad).map_err(|e| e.for_subject(&subj.id))?;
    let mut extra = BTreeMap::new();
    for (name, f) in extras {
        extra.insert(name.to_string(), cloud.expect(|a| f(a)));
    }
    Ok(PosteriorSummary {
        log_norm: cloud.log_norm,
        mean: cloud.mean(),
        second_moment: cloud.second_moment(),
        extra,
    })
}

/// Exact Gaussian posterior of `a` ignoring the survival factor:
/// `V_a = (Σ_a⁻¹ + X̃ᵀX̃/σ_y²)⁻¹` and `m_a = V_a X̃ᵀ(Y − Xβ)/σ_y²`.
pub fn closed_form_gaussian_posterior(
    subj: &SubjectRecord,
    theta: &ThetaParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    likelihood::check_dims(subj, theta)?;
    let eval = SubjectEval::new(subj, theta, &StepCumHazard::zero())?;
    Ok(eval.gaussian_posterior())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `E[x^k]` for `x ~ N(0,1)`: zero for odd `k`, `(k−1)!!` for even `k`.
    fn normal_moment(k: usize) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            let mut v = 1.0;
            let mut i = k as i64 - 1;
            while i > 1 {
                v *= i as f64;
                i -= 2;
            }
            v
        }
    }

    #[test]
    fn one_point_rule_is_midpoint() {
        let rule = gauss_hermite_rule(1, 1).unwrap();
        assert_eq!(rule.len(), 1);
        assert_abs_diff_eq!(rule.nodes()[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_point_rule_matches_first_two_moments() {
        let rule = gauss_hermite_rule(2, 1).unwrap();
        let mut nodes: Vec<f64> = rule.nodes().column(0).iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(nodes[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(nodes[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights()[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights()[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn ten_point_rule_fourth_moment() {
        let rule = gauss_hermite_rule(10, 1).unwrap();
        let m4: f64 = (0..rule.len())
            .map(|j| rule.weights()[j] * rule.nodes()[(j, 0)].powi(4))
            .sum();
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn polynomial_exactness_up_to_degree_2m_minus_1() {
        for m in 1..=8usize {
            let rule = gauss_hermite_rule(m, 1).unwrap();
            for k in 0..2 * m {
                let approx: f64 = (0..rule.len())
                    .map(|j| rule.weights()[j] * rule.nodes()[(j, 0)].powi(k as i32))
                    .sum();
                assert_abs_diff_eq!(approx, normal_moment(k), epsilon = 1e-12 * normal_moment(k).max(1.0));
            }
        }
    }

    #[test]
    fn tensor_rule_moments() {
        let rule = gauss_hermite_rule(5, 2).unwrap();
        assert_eq!(rule.len(), 25);
        let total: f64 = rule.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let mixed: f64 = (0..rule.len())
            .map(|j| rule.weights()[j] * rule.nodes()[(j, 0)] * rule.nodes()[(j, 1)])
            .sum();
        assert_abs_diff_eq!(mixed, 0.0, epsilon = 1e-13);
        let sq: f64 = (0..rule.len())
            .map(|j| {
                rule.weights()[j] * rule.nodes()[(j, 0)].powi(2) * rule.nodes()[(j, 1)].powi(2)
            })
            .sum();
        assert_abs_diff_eq!(sq, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_unsupported_sizes() {
        assert!(gauss_hermite_rule(0, 1).is_err());
        assert!(gauss_hermite_rule(65, 1).is_err());
        assert!(gauss_hermite_rule(5, 0).is_err());
        assert!(gauss_hermite_rule(5, 5).is_err());
    }

    #[test]
    fn recentered_cloud_integrates_gaussian_exactly() {
        // ∫ N(a; 1, 0.25) da = 1 under any valid centering.
        let rule = gauss_hermite_rule(15, 1).unwrap();
        let center = GaussCenter::new(
            DVector::from_vec(vec![0.5]),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let log_g = |a: &DVector<f64>| {
            let r = a[0] - 1.0;
            -0.5 * LN_2PI - 0.5 * (0.25f64).ln() - r * r / (2.0 * 0.25)
        };
        let cloud = cloud_from_log_density(&rule, &center, log_g).unwrap();
        assert_abs_diff_eq!(cloud.log_norm, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cloud.mean()[0], 1.0, epsilon = 1e-9);
    }
}
