//! The complete-data kernel `G`, the observed-data log-likelihood, the
//! posterior hazard-multiplier kernel `Q`, and analytic scores.
//!
//! For one subject with observed data `O = (Y, X, X̃, Z, Δ, W(·), W̃(·))`,
//!
//! ```text
//! G(a, O; θ, Λ) = (2πσ_y²)^{−N/2} {(2π)^{d_a}|Σ_a|}^{−1/2}
//!     × exp{ −‖Y − Xβ − X̃a‖²/(2σ_y²) − aᵀΣ_a⁻¹a/2
//!            + Δ((φ∘W̃(Z))ᵀa + W(Z)ᵀγ)
//!            − ∫₀^Z e^{(φ∘W̃(t))ᵀa + W(t)ᵀγ} dΛ(t) }
//! ```
//!
//! and the subject log-likelihood is `log ∫ G da + Δ log Λ{Z}`. All `dΛ`
//! integrals are finite sums over jump times `t_k ≤ Z` (closed comparison,
//! so an event-time jump is included). All `a`-integrals run through the
//! quadrature module in log space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dataset, StepCumHazard, SubjectRecord, ThetaParams, TIME_TOL};
use crate::quadrature::{posterior_cloud, Cloud, Quadrature};

const LN_2PI: f64 = 1.8378770664093453;

/// Check that a subject's paths and responses conform to the parameter
/// dimensions. The hazard loading is componentwise on the random effect, so
/// `dim(φ) = dim(W̃) = d_a` is required.
pub fn check_dims(subj: &SubjectRecord, theta: &ThetaParams) -> Result<()> {
    let d_a = theta.sigma_a.nrows();
    if theta.phi.len() != d_a {
        return Err(Error::Parameter(format!(
            "phi has length {} but the random effect has dimension {d_a}; \
             the loading (phi ∘ W̃(t))ᵀa pairs componentwise",
            theta.phi.len()
        )));
    }
    let mismatch = |what: &str, got: usize, want: usize| {
        Err(Error::Subject {
            id: subj.id.clone(),
            msg: format!("{what} has dimension {got}, expected {want}"),
        })
    };
    if subj.x_path.dim() != theta.beta.len() {
        return mismatch("x_path", subj.x_path.dim(), theta.beta.len());
    }
    if subj.xt_path.dim() != d_a {
        return mismatch("xt_path", subj.xt_path.dim(), d_a);
    }
    if subj.w_path.dim() != theta.gamma.len() {
        return mismatch("w_path", subj.w_path.dim(), theta.gamma.len());
    }
    if subj.wt_path.dim() != theta.phi.len() {
        return mismatch("wt_path", subj.wt_path.dim(), theta.phi.len());
    }
    if subj.meas_times.len() != subj.y.len() {
        return mismatch("y", subj.y.len(), subj.meas_times.len());
    }
    Ok(())
}

/// One maximal interval of `[0, Z]` on which both `W(·)` and `W̃(·)` are
/// constant.
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    /// `W` on the segment.
    pub w: DVector<f64>,
    /// `W̃` on the segment.
    pub wt: DVector<f64>,
    /// `φ ∘ W̃` on the segment.
    pub c: DVector<f64>,
    /// `W ᵀ γ` on the segment.
    pub wgam: f64,
    /// Total hazard jump mass falling in the segment (times `≤ Z`).
    pub mass: f64,
}

/// Precomputed evaluation state for one subject under fixed `(θ, Λ)`.
pub(crate) struct SubjectEval {
    pub id: String,
    pub delta: bool,
    pub z: f64,
    pub n_meas: usize,
    /// `N × p` design at measurement times.
    pub x_stack: DMatrix<f64>,
    /// `N × d_a` random-effect design at measurement times.
    pub xt_stack: DMatrix<f64>,
    /// `X̃ᵀX̃`.
    pub xt_gram: DMatrix<f64>,
    /// `Y − Xβ`.
    pub resid: DVector<f64>,
    /// `X̃ᵀ(Y − Xβ)`.
    pub xt_resid: DVector<f64>,
    pub resid_sq: f64,
    pub sigma_inv: DMatrix<f64>,
    pub sigma_a: DMatrix<f64>,
    pub sigma_y2: f64,
    /// `a`-free part of `log G`, including `Δ·W(Z)ᵀγ`.
    pub const_log: f64,
    /// `φ ∘ W̃(Z)`.
    pub c_z: DVector<f64>,
    /// `W(Z)` and `W̃(Z)`.
    pub w_z: DVector<f64>,
    pub wt_z: DVector<f64>,
    pub segments: Vec<Segment>,
    /// Hazard jumps at times `≤ Z`: (time, size, segment index). Because the
    /// support is sorted this is a prefix of the global jump list.
    pub jumps: Vec<(f64, f64, usize)>,
}

impl SubjectEval {
    pub fn new(subj: &SubjectRecord, theta: &ThetaParams, lam: &StepCumHazard) -> Result<SubjectEval> {
        let n = subj.meas_times.len();
        let p = theta.beta.len();
        let d_a = theta.sigma_a.nrows();

        let chol = theta
            .sigma_a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Parameter("sigma_a is not positive definite".into()))?;
        let sigma_inv = chol.inverse();
        let log_det_sigma = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let mut x_stack = DMatrix::zeros(n, p);
        let mut xt_stack = DMatrix::zeros(n, d_a);
        for (j, &t) in subj.meas_times.iter().enumerate() {
            x_stack.row_mut(j).copy_from(&subj.x_path.value_at(t).transpose());
            xt_stack.row_mut(j).copy_from(&subj.xt_path.value_at(t).transpose());
        }
        let resid = &subj.y - &x_stack * &theta.beta;
        let xt_resid = xt_stack.transpose() * &resid;
        let resid_sq = resid.norm_squared();
        let xt_gram = xt_stack.transpose() * &xt_stack;

        let w_z = subj.w_path.value_at(subj.z);
        let wt_z = subj.wt_path.value_at(subj.z);
        let c_z = theta.phi.component_mul(&wt_z);

        let sigma_y2 = theta.sigma_y * theta.sigma_y;
        let mut const_log = -0.5 * (n as f64) * (LN_2PI + sigma_y2.ln())
            - 0.5 * (d_a as f64) * LN_2PI
            - 0.5 * log_det_sigma;
        if subj.delta {
            const_log += w_z.dot(&theta.gamma);
        }

        // Merge the change points of W and W̃ on [0, z] into segments.
        let mut cuts: Vec<f64> = subj
            .w_path
            .change_points()
            .iter()
            .chain(subj.wt_path.change_points())
            .copied()
            .filter(|&c| c <= subj.z)
            .collect();
        cuts.push(0.0);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut segments: Vec<Segment> = cuts
            .iter()
            .map(|&start| {
                let w = subj.w_path.value_at(start);
                let wt = subj.wt_path.value_at(start);
                let c = theta.phi.component_mul(&wt);
                let wgam = w.dot(&theta.gamma);
                Segment {
                    w,
                    wt,
                    c,
                    wgam,
                    mass: 0.0,
                }
            })
            .collect();

        let mut jumps = Vec::new();
        for (&t, &sz) in lam.jump_times().iter().zip(lam.jump_sizes()) {
            if t > subj.z + TIME_TOL {
                break;
            }
            let seg = cuts.partition_point(|&c| c <= t).saturating_sub(1);
            segments[seg].mass += sz;
            jumps.push((t, sz, seg));
        }

        Ok(SubjectEval {
            id: subj.id.clone(),
            delta: subj.delta,
            z: subj.z,
            n_meas: n,
            x_stack,
            xt_stack,
            xt_gram,
            resid,
            xt_resid,
            resid_sq,
            sigma_inv,
            sigma_a: theta.sigma_a.clone(),
            sigma_y2,
            const_log,
            c_z,
            w_z,
            wt_z,
            segments,
            jumps,
        })
    }

    /// `log G(a, O; θ, Λ)`.
    pub fn log_g(&self, a: &DVector<f64>) -> f64 {
        let quad = self.resid_sq - 2.0 * a.dot(&self.xt_resid) + (&self.xt_gram * a).dot(a);
        let prior = (&self.sigma_inv * a).dot(a);
        let mut v = self.const_log - quad / (2.0 * self.sigma_y2) - 0.5 * prior;
        if self.delta {
            v += self.c_z.dot(a);
        }
        for seg in &self.segments {
            if seg.mass > 0.0 {
                v -= seg.mass * (seg.c.dot(a) + seg.wgam).exp();
            }
        }
        v
    }

    /// Closed-form Gaussian posterior ignoring the survival factor:
    /// `V = (Σ_a⁻¹ + X̃ᵀX̃/σ_y²)⁻¹`, `m = V X̃ᵀ(Y − Xβ)/σ_y²`.
    pub fn gaussian_posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let precision = &self.sigma_inv + &self.xt_gram / self.sigma_y2;
        let v = precision
            .cholesky()
            .expect("posterior precision is positive definite by construction")
            .inverse();
        let m = &v * &self.xt_resid / self.sigma_y2;
        (m, v)
    }
}

/// The complete-data kernel `G(a, O; θ, Λ)`.
pub fn complete_data_kernel(
    a: &DVector<f64>,
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
) -> Result<f64> {
    check_dims(subj, theta)?;
    if a.len() != theta.sigma_a.nrows() {
        return Err(Error::Parameter(format!(
            "random effect has length {}, expected {}",
            a.len(),
            theta.sigma_a.nrows()
        )));
    }
    let eval = SubjectEval::new(subj, theta, lam)?;
    Ok(eval.log_g(a).exp())
}

fn cloud_for(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    quad: &Quadrature,
) -> Result<(SubjectEval, Cloud)> {
    let eval = SubjectEval::new(subj, theta, lam)?;
    let cloud = posterior_cloud(&eval, theta, quad).map_err(|e| e.for_subject(&subj.id))?;
    Ok((eval, cloud))
}

/// `log [Λ{Z}^Δ ∫ G(a, O; θ, Λ) da]` for one subject.
pub fn subject_loglik(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    quad: &Quadrature,
) -> Result<f64> {
    check_dims(subj, theta)?;
    let jump_term = if subj.delta {
        match lam.jump_at(subj.z) {
            Some(sz) => sz.ln(),
            None => {
                return Err(Error::Subject {
                    id: subj.id.clone(),
                    msg: "event time not in hazard support".into(),
                })
            }
        }
    } else {
        0.0
    };
    let (_, cloud) = cloud_for(subj, theta, lam, quad)?;
    Ok(cloud.log_norm + jump_term)
}

/// Sum of subject log-likelihoods, reduced in subject order so the result
/// is reproducible regardless of worker count.
pub fn total_loglik(
    data: &Dataset,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    quad: &Quadrature,
) -> Result<f64> {
    crate::model::require_valid(data)?;
    use rayon::prelude::*;
    let per_subject: Vec<Result<f64>> = data
        .subjects
        .par_iter()
        .map(|s| subject_loglik(s, theta, lam, quad).map_err(|e| e.for_subject(&s.id)))
        .collect();
    let mut total = 0.0;
    for r in per_subject {
        total += r?;
    }
    Ok(total)
}

/// Posterior-expected hazard multiplier
/// `Q(z, O; θ, Λ) = E[e^{(φ∘W̃(z))ᵀa + W(z)ᵀγ} | O]`.
pub fn q_weight(
    z: f64,
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    quad: &Quadrature,
) -> Result<f64> {
    check_dims(subj, theta)?;
    if !z.is_finite() || z < 0.0 {
        return Err(Error::Invalid(format!("evaluation time {z} must lie in [0, tau]")));
    }
    let (_, cloud) = cloud_for(subj, theta, lam, quad)?;
    let c = theta.phi.component_mul(&subj.wt_path.value_at(z));
    let wg = subj.w_path.value_at(z).dot(&theta.gamma);
    let q = cloud.expect(|a| (c.dot(a) + wg).exp());
    if !q.is_finite() || q <= 0.0 {
        return Err(Error::Numeric {
            id: subj.id.clone(),
            msg: format!("hazard multiplier Q({z}) evaluated to {q}"),
        });
    }
    Ok(q)
}

/// Gradient of [`subject_loglik`] with respect to the flattened `θ` at
/// fixed `Λ`, assembled from the posterior-expectation forms of the score
/// kernels.
pub fn score_theta(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    quad: &Quadrature,
) -> Result<DVector<f64>> {
    check_dims(subj, theta)?;
    let (eval, cloud) = cloud_for(subj, theta, lam, quad)?;
    let d_a = theta.sigma_a.nrows();
    let p = theta.beta.len();
    let r = theta.gamma.len();
    let s = theta.phi.len();
    let mean = cloud.mean();
    let second = cloud.second_moment();

    let mut out = Vec::with_capacity(1 + d_a * (d_a + 1) / 2 + p + r + s);

    // σ_y: E[−N/σ + ‖Y − Xβ − X̃a‖²/σ³].
    let e_quad = eval.resid_sq - 2.0 * eval.xt_resid.dot(&mean)
        + (&eval.xt_gram * &second).trace();
    let sigma = theta.sigma_y;
    out.push(-(eval.n_meas as f64) / sigma + e_quad / (sigma * sigma * sigma));

    // Σ_a block: direction D places h entries symmetrically; the score along
    // D is E[aᵀΣ⁻¹DΣ⁻¹a − Tr(Σ⁻¹D)]/2, i.e. (M − P)/2 on the diagonal and
    // (M − P) off it, with M = Σ⁻¹ E[aaᵀ] Σ⁻¹ and P = Σ⁻¹.
    let m_mat = &eval.sigma_inv * &second * &eval.sigma_inv;
    for i in 0..d_a {
        for j in i..d_a {
            let v = m_mat[(i, j)] - eval.sigma_inv[(i, j)];
            out.push(if i == j { 0.5 * v } else { v });
        }
    }

    // β: X ᵀ(Y − Xβ − X̃ E[a]) / σ².
    let beta_score = eval.x_stack.transpose() * (&eval.resid - &eval.xt_stack * &mean)
        / eval.sigma_y2;
    out.extend(beta_score.iter());

    // γ and φ: Δ·{W(Z), W̃(Z)∘E[a]} minus the posterior-weighted hazard sums.
    let mut gamma_score = if eval.delta {
        eval.w_z.clone()
    } else {
        DVector::zeros(r)
    };
    let mut phi_score = if eval.delta {
        eval.wt_z.component_mul(&mean)
    } else {
        DVector::zeros(s)
    };
    for seg in &eval.segments {
        if seg.mass == 0.0 {
            continue;
        }
        let e_exp = cloud.expect(|a| (seg.c.dot(a) + seg.wgam).exp());
        let mut e_exp_a = DVector::zeros(d_a);
        for (a, w) in cloud.points.iter().zip(&cloud.weights) {
            e_exp_a.axpy(w * (seg.c.dot(a) + seg.wgam).exp(), a, 1.0);
        }
        gamma_score.axpy(-seg.mass * e_exp, &seg.w, 1.0);
        phi_score.axpy(-seg.mass, &seg.wt.component_mul(&e_exp_a), 1.0);
    }
    out.extend(gamma_score.iter());
    out.extend(phi_score.iter());

    Ok(DVector::from_vec(out))
}

/// Real-valued function of bounded variation on `[0, τ]`, used as a
/// perturbation direction for `Λ`.
#[derive(Debug, Clone)]
pub enum BvFunction {
    Constant(f64),
    /// The indicator of `[0, end]`.
    Indicator { end: f64 },
    /// Right-continuous step function; `knots[0]` must be 0.
    Step { knots: Vec<f64>, values: Vec<f64> },
    /// Continuous piecewise-linear interpolation through the knots.
    PiecewiseLinear { knots: Vec<f64>, values: Vec<f64> },
}

impl BvFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            BvFunction::Constant(c) => *c,
            BvFunction::Indicator { end } => {
                if t <= *end {
                    1.0
                } else {
                    0.0
                }
            }
            BvFunction::Step { knots, values } => {
                let idx = knots.partition_point(|&k| k <= t).saturating_sub(1);
                values[idx]
            }
            BvFunction::PiecewiseLinear { knots, values } => {
                if t <= knots[0] {
                    return values[0];
                }
                if t >= *knots.last().unwrap() {
                    return *values.last().unwrap();
                }
                let hi = knots.partition_point(|&k| k <= t);
                let (t0, t1) = (knots[hi - 1], knots[hi]);
                let (v0, v1) = (values[hi - 1], values[hi]);
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn total_variation(&self) -> f64 {
        match self {
            BvFunction::Constant(_) => 0.0,
            BvFunction::Indicator { .. } => 1.0,
            BvFunction::Step { values, .. } | BvFunction::PiecewiseLinear { values, .. } => values
                .windows(2)
                .map(|w| (w[1] - w[0]).abs())
                .sum(),
        }
    }
}

/// A perturbation direction `(h₁, h₂)` for `(θ, Λ)`.
#[derive(Debug, Clone)]
pub struct Direction {
    pub h1: DVector<f64>,
    pub h2: BvFunction,
}

impl Direction {
    /// Whether the direction lies in the canonical set
    /// `{‖h₁‖ ≤ 1, ‖h₂‖_V ≤ 1}`.
    pub fn is_canonical(&self) -> bool {
        self.h1.norm() <= 1.0 + 1e-12 && self.h2.total_variation() <= 1.0 + 1e-12
    }
}

/// Directional derivative of [`subject_loglik`] along
/// `Λ_ε = ∫ (1 + ε h₂) dΛ` at `ε = 0`:
/// `Δ h₂(Z) − ∫₀^Z μ₃(t) h₂(t) dΛ(t)` with `μ₃ = Q`.
pub fn score_lambda(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    h2: &BvFunction,
    quad: &Quadrature,
) -> Result<f64> {
    check_dims(subj, theta)?;
    let (eval, cloud) = cloud_for(subj, theta, lam, quad)?;
    let mut out = if eval.delta { h2.eval(eval.z) } else { 0.0 };
    // Segment-level posterior expectations of the hazard multiplier.
    let seg_q: Vec<f64> = eval
        .segments
        .iter()
        .map(|seg| {
            if seg.mass == 0.0 {
                0.0
            } else {
                cloud.expect(|a| (seg.c.dot(a) + seg.wgam).exp())
            }
        })
        .collect();
    for &(t, sz, seg) in &eval.jumps {
        out -= sz * h2.eval(t) * seg_q[seg];
    }
    Ok(out)
}

/// The combined score `score_theta ᵀ h₁ + score_lambda[h₂]`.
pub fn directional_score(
    subj: &SubjectRecord,
    theta: &ThetaParams,
    lam: &StepCumHazard,
    dir: &Direction,
    quad: &Quadrature,
) -> Result<f64> {
    let st = score_theta(subj, theta, lam, quad)?;
    if st.len() != dir.h1.len() {
        return Err(Error::Parameter(format!(
            "direction h1 has length {}, expected {}",
            dir.h1.len(),
            st.len()
        )));
    }
    Ok(st.dot(&dir.h1) + score_lambda(subj, theta, lam, &dir.h2, quad)?)
}
