//! Domain types for the joint model of repeated measurements and survival time.
//!
//! A subject carries longitudinal measurements `Y(t_j)` taken before the
//! follow-up time `Z`, four piecewise-constant covariate paths, and the
//! censoring indicator `Δ`. The finite-dimensional parameter is
//! `θ = (σ_y, Vec(Σ_a), β, γ, φ)` and the infinite-dimensional nuisance is the
//! cumulative baseline hazard `Λ`, represented here as a right-continuous
//! step function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Time tolerance used when matching hazard jump times against event times.
pub const TIME_TOL: f64 = 1e-12;

/// Covariate dimensions and the administrative end of study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    /// Dimension of the fixed-effect path `X(t)`.
    pub p: usize,
    /// Dimension of the random effect and of `X̃(t)`.
    pub d_a: usize,
    /// Dimension of the hazard regression path `W(t)`.
    pub r: usize,
    /// Dimension of the random-effect loading path `W̃(t)`.
    pub s: usize,
    /// End of study; every follow-up time satisfies `z ≤ tau`.
    pub tau: f64,
}

impl ModelSpec {
    /// Number of coordinates in the flattened parameter vector.
    pub fn theta_dim(&self) -> usize {
        1 + self.d_a * (self.d_a + 1) / 2 + self.p + self.r + self.s
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 {
            return Err(Error::Invalid("d_a must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Invalid(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The finite-dimensional parameter `θ = (σ_y, Vec(Σ_a), β, γ, φ)`.
///
/// `Vec(Σ_a)` is the upper-triangle vectorization with off-diagonal entries
/// counted once, in row-major order `(0,0), (0,1), …, (1,1), …`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    /// Residual standard deviation of the measurement noise.
    pub sigma_y: f64,
    /// Random-effect covariance, `d_a × d_a`, symmetric positive definite.
    pub sigma_a: DMatrix<f64>,
    /// Fixed effects, length `p`.
    pub beta: DVector<f64>,
    /// Hazard regression coefficients, length `r`.
    pub gamma: DVector<f64>,
    /// Random-effect loading in the hazard, length `s`.
    pub phi: DVector<f64>,
}

impl ThetaParams {
    pub fn new(
        sigma_y: f64,
        sigma_a: DMatrix<f64>,
        beta: DVector<f64>,
        gamma: DVector<f64>,
        phi: DVector<f64>,
    ) -> Self {
        ThetaParams {
            sigma_y,
            sigma_a,
            beta,
            gamma,
            phi,
        }
    }

    /// Check the parameter invariants against the owning `ModelSpec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.sigma_y > 0.0) || !self.sigma_y.is_finite() {
            return Err(Error::Parameter(format!(
                "sigma_y must be positive and finite, got {}",
                self.sigma_y
            )));
        }
        let d = spec.d_a;
        if self.sigma_a.nrows() != d || self.sigma_a.ncols() != d {
            return Err(Error::Parameter(format!(
                "sigma_a must be {d}x{d}, got {}x{}",
                self.sigma_a.nrows(),
                self.sigma_a.ncols()
            )));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.sigma_a[(i, j)] - self.sigma_a[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Parameter(format!(
                        "sigma_a is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let eig = self.sigma_a.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::Parameter(format!(
                "sigma_a is not positive definite (smallest eigenvalue {min_eig:.3e})"
            )));
        }
        if self.beta.len() != spec.p {
            return Err(Error::Parameter(format!(
                "beta has length {}, expected p = {}",
                self.beta.len(),
                spec.p
            )));
        }
        if self.gamma.len() != spec.r {
            return Err(Error::Parameter(format!(
                "gamma has length {}, expected r = {}",
                self.gamma.len(),
                spec.r
            )));
        }
        if self.phi.len() != spec.s {
            return Err(Error::Parameter(format!(
                "phi has length {}, expected s = {}",
                self.phi.len(),
                spec.s
            )));
        }
        Ok(())
    }

    /// Flatten to the canonical coordinate vector
    /// `[σ_y, Vec(Σ_a), β, γ, φ]`.
    pub fn flatten(&self) -> DVector<f64> {
        let d = self.sigma_a.nrows();
        let mut v = Vec::with_capacity(1 + d * (d + 1) / 2 + self.beta.len() + self.gamma.len() + self.phi.len());
        v.push(self.sigma_y);
        for i in 0..d {
            for j in i..d {
                v.push(self.sigma_a[(i, j)]);
            }
        }
        v.extend(self.beta.iter());
        v.extend(self.gamma.iter());
        v.extend(self.phi.iter());
        DVector::from_vec(v)
    }

    /// Rebuild from a flattened coordinate vector. Symmetry of `Σ_a` is
    /// restored by mirroring the upper triangle.
    pub fn from_flat(spec: &ModelSpec, flat: &DVector<f64>) -> Result<ThetaParams> {
        if flat.len() != spec.theta_dim() {
            return Err(Error::Parameter(format!(
                "flattened theta has length {}, expected {}",
                flat.len(),
                spec.theta_dim()
            )));
        }
        let mut k = 0usize;
        let sigma_y = flat[k];
        k += 1;
        let d = spec.d_a;
        let mut sigma_a = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                sigma_a[(i, j)] = flat[k];
                sigma_a[(j, i)] = flat[k];
                k += 1;
            }
        }
        let beta = DVector::from_iterator(spec.p, flat.iter().skip(k).take(spec.p).copied());
        k += spec.p;
        let gamma = DVector::from_iterator(spec.r, flat.iter().skip(k).take(spec.r).copied());
        k += spec.r;
        let phi = DVector::from_iterator(spec.s, flat.iter().skip(k).take(spec.s).copied());
        Ok(ThetaParams {
            sigma_y,
            sigma_a,
            beta,
            gamma,
            phi,
        })
    }

    /// Human-readable names of the flattened coordinates, in order.
    pub fn coord_names(spec: &ModelSpec) -> Vec<String> {
        let mut names = vec!["sigma_y".to_string()];
        for i in 0..spec.d_a {
            for j in i..spec.d_a {
                names.push(format!("sigma_a[{i},{j}]"));
            }
        }
        for i in 0..spec.p {
            names.push(format!("beta[{i}]"));
        }
        for i in 0..spec.r {
            names.push(format!("gamma[{i}]"));
        }
        for i in 0..spec.s {
            names.push(format!("phi[{i}]"));
        }
        names
    }
}

/// Nondecreasing right-continuous step function `Λ(t) = Σ_{t_k ≤ t} Λ{t_k}`
/// with `Λ(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCumHazard {
    jump_times: Vec<f64>,
    jump_sizes: Vec<f64>,
}

impl StepCumHazard {
    /// Build from strictly increasing jump times and positive jump sizes.
    pub fn new(jump_times: Vec<f64>, jump_sizes: Vec<f64>) -> Result<StepCumHazard> {
        if jump_times.len() != jump_sizes.len() {
            return Err(Error::Invalid(format!(
                "jump_times has length {}, jump_sizes has length {}",
                jump_times.len(),
                jump_sizes.len()
            )));
        }
        for (k, &t) in jump_times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Invalid(format!("jump time {t} at index {k} is invalid")));
            }
            if k > 0 && t <= jump_times[k - 1] {
                return Err(Error::Invalid(format!(
                    "jump times must be strictly increasing (index {k})"
                )));
            }
        }
        for (k, &sz) in jump_sizes.iter().enumerate() {
            if !sz.is_finite() || sz <= 0.0 {
                return Err(Error::Invalid(format!(
                    "jump size {sz} at index {k} must be finite and positive"
                )));
            }
        }
        Ok(StepCumHazard {
            jump_times,
            jump_sizes,
        })
    }

    /// The zero hazard `Λ ≡ 0`.
    pub fn zero() -> StepCumHazard {
        StepCumHazard {
            jump_times: Vec::new(),
            jump_sizes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.jump_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_sizes(&self) -> &[f64] {
        &self.jump_sizes
    }

    /// `Λ(t)`: cumulative sum of jumps at times `≤ t`.
    pub fn value_at(&self, t: f64) -> f64 {
        self.jump_times
            .iter()
            .zip(&self.jump_sizes)
            .take_while(|(tk, _)| **tk <= t + TIME_TOL)
            .map(|(_, sz)| sz)
            .sum()
    }

    /// Number of jumps at times `≤ z` (closed comparison with `TIME_TOL`).
    pub fn n_jumps_up_to(&self, z: f64) -> usize {
        self.jump_times.partition_point(|&tk| tk <= z + TIME_TOL)
    }

    /// Jump size at time `t`, matched within `TIME_TOL`.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        let idx = self.jump_times.partition_point(|&tk| tk < t - TIME_TOL);
        if idx < self.jump_times.len() && (self.jump_times[idx] - t).abs() <= TIME_TOL {
            Some(self.jump_sizes[idx])
        } else {
            None
        }
    }

    /// Replace the jump sizes, keeping the support.
    pub fn with_sizes(&self, sizes: Vec<f64>) -> Result<StepCumHazard> {
        StepCumHazard::new(self.jump_times.clone(), sizes)
    }
}

/// Right-continuous piecewise-constant covariate path on `[0, τ]`.
///
/// The value at `t` is the row of the largest change point `≤ t`; the last
/// segment extends to `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePath {
    change_points: Vec<f64>,
    values: DMatrix<f64>,
}

impl CovariatePath {
    pub fn new(change_points: Vec<f64>, values: DMatrix<f64>) -> Result<CovariatePath> {
        if change_points.is_empty() {
            return Err(Error::Invalid("covariate path needs at least one change point".into()));
        }
        if change_points[0] != 0.0 {
            return Err(Error::Invalid(format!(
                "covariate path must start at 0, got {}",
                change_points[0]
            )));
        }
        if values.nrows() != change_points.len() {
            return Err(Error::Invalid(format!(
                "covariate path has {} change points but {} value rows",
                change_points.len(),
                values.nrows()
            )));
        }
        for (k, &c) in change_points.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::Invalid(format!("change point {c} at index {k} is invalid")));
            }
            if k > 0 && c < change_points[k - 1] {
                return Err(Error::Invalid(format!(
                    "change points must be nondecreasing (index {k})"
                )));
            }
        }
        Ok(CovariatePath {
            change_points,
            values,
        })
    }

    /// A path constant over all of `[0, τ]`.
    pub fn constant(value: DVector<f64>) -> CovariatePath {
        CovariatePath {
            change_points: vec![0.0],
            values: DMatrix::from_rows(&[value.transpose()]),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn change_points(&self) -> &[f64] {
        &self.change_points
    }

    /// Index of the segment active at time `t ≥ 0`.
    pub fn segment_at(&self, t: f64) -> usize {
        self.change_points.partition_point(|&c| c <= t).saturating_sub(1)
    }

    /// Right-continuous evaluation; no domain check (internal hot path).
    pub fn value_at(&self, t: f64) -> DVector<f64> {
        self.values.row(self.segment_at(t)).transpose()
    }

    pub fn value_row(&self, seg: usize) -> nalgebra::RowDVector<f64> {
        self.values.row(seg).into_owned()
    }
}

/// Evaluate a covariate path at time `t` with the domain check against `τ`.
pub fn eval_path(path: &CovariatePath, t: f64, tau: f64) -> Result<DVector<f64>> {
    if !t.is_finite() || t < 0.0 || t > tau {
        return Err(Error::Invalid(format!(
            "time {t} outside the study interval [0, {tau}]"
        )));
    }
    Ok(path.value_at(t))
}

/// One subject's observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Measurement times, strictly increasing, all `< z`.
    pub meas_times: Vec<f64>,
    /// Observed responses, same length as `meas_times`.
    pub y: DVector<f64>,
    /// Fixed-effect covariate path `X(t)`, dimension `p`.
    pub x_path: CovariatePath,
    /// Random-effect design path `X̃(t)`, dimension `d_a`.
    pub xt_path: CovariatePath,
    /// Hazard regression path `W(t)`, dimension `r`.
    pub w_path: CovariatePath,
    /// Random-effect loading path `W̃(t)`, dimension `s`.
    pub wt_path: CovariatePath,
    /// Follow-up time `Z = T ∧ C`.
    pub z: f64,
    /// Event indicator `Δ = I(T ≤ C)`.
    pub delta: bool,
}

impl SubjectRecord {
    pub fn n_meas(&self) -> usize {
        self.meas_times.len()
    }
}

/// A complete dataset: model dimensions plus the subject records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    /// Sorted distinct event times `{Z_i : Δ_i = 1}`.
    pub fn distinct_event_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .subjects
            .iter()
            .filter(|s| s.delta)
            .map(|s| s.z)
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        times
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }
}

/// A single invariant violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending subject, or `None` for dataset-level violations.
    pub subject: Option<String>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.subject {
            Some(id) => write!(f, "subject {id}: {}", self.rule),
            None => write!(f, "dataset: {}", self.rule),
        }
    }
}

/// Check every type invariant; returns an empty list iff the dataset is valid.
pub fn validate_dataset(data: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let spec = &data.spec;
    if let Err(e) = spec.validate() {
        out.push(Violation {
            subject: None,
            rule: e.to_string(),
        });
        return out;
    }
    let mut any_event = false;
    for subj in &data.subjects {
        let mut push = |rule: String| {
            out.push(Violation {
                subject: Some(subj.id.clone()),
                rule,
            })
        };
        if subj.meas_times.len() != subj.y.len() {
            push(format!(
                "meas_times has length {} but y has length {}",
                subj.meas_times.len(),
                subj.y.len()
            ));
        }
        for (k, &t) in subj.meas_times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                push(format!("measurement time {t} is invalid"));
            }
            if k > 0 && t <= subj.meas_times[k - 1] {
                push("measurement times must be strictly increasing".into());
            }
            if t >= subj.z {
                push("measurement at or after follow-up time".into());
            }
        }
        if !(subj.z > 0.0) || subj.z > spec.tau {
            push(format!("follow-up time {} outside (0, tau = {}]", subj.z, spec.tau));
        }
        if subj.x_path.dim() != spec.p {
            push(format!("x_path has dimension {}, expected p = {}", subj.x_path.dim(), spec.p));
        }
        if subj.xt_path.dim() != spec.d_a {
            push(format!(
                "xt_path has dimension {}, expected d_a = {}",
                subj.xt_path.dim(),
                spec.d_a
            ));
        }
        if subj.w_path.dim() != spec.r {
            push(format!("w_path has dimension {}, expected r = {}", subj.w_path.dim(), spec.r));
        }
        if subj.wt_path.dim() != spec.s {
            push(format!("wt_path has dimension {}, expected s = {}", subj.wt_path.dim(), spec.s));
        }
        for y in subj.y.iter() {
            if !y.is_finite() {
                push(format!("response value {y} is not finite"));
                break;
            }
        }
        any_event |= subj.delta;
    }
    if !data.subjects.is_empty() && !any_event {
        out.push(Violation {
            subject: None,
            rule: "no observed events".into(),
        });
    }
    out
}

/// Validate and convert findings into an error for fitting entry points.
pub fn require_valid(data: &Dataset) -> Result<()> {
    let findings = validate_dataset(data);
    if findings.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = findings.iter().map(|v| v.to_string()).collect();
        Err(Error::Invalid(msgs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_path(pairs: &[(f64, f64)]) -> CovariatePath {
        let cps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let vals = DMatrix::from_iterator(pairs.len(), 1, pairs.iter().map(|p| p.1));
        CovariatePath::new(cps, vals).unwrap()
    }

    fn tiny_subject(id: &str, z: f64, delta: bool) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            meas_times: vec![0.0],
            y: DVector::from_vec(vec![0.5]),
            x_path: CovariatePath::constant(DVector::from_vec(vec![1.0])),
            xt_path: CovariatePath::constant(DVector::from_vec(vec![1.0])),
            w_path: CovariatePath::constant(DVector::from_vec(vec![0.0])),
            wt_path: CovariatePath::constant(DVector::from_vec(vec![1.0])),
            z,
            delta,
        }
    }

    fn tiny_dataset() -> Dataset {
        Dataset {
            spec: ModelSpec {
                p: 1,
                d_a: 1,
                r: 1,
                s: 1,
                tau: 10.0,
            },
            subjects: vec![
                tiny_subject("a", 1.0, true),
                tiny_subject("b", 2.0, false),
                tiny_subject("c", 3.0, true),
            ],
        }
    }

    #[test]
    fn eval_path_right_continuous() {
        let path = simple_path(&[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(eval_path(&path, 1.0, 10.0).unwrap()[0], 1.0);
        assert_eq!(eval_path(&path, 2.0, 10.0).unwrap()[0], 3.0);
        assert_eq!(eval_path(&path, 5.0, 10.0).unwrap()[0], 3.0);
        assert!(eval_path(&path, 11.0, 10.0).is_err());
        assert!(eval_path(&path, -0.5, 10.0).is_err());
    }

    #[test]
    fn well_formed_dataset_passes() {
        assert!(validate_dataset(&tiny_dataset()).is_empty());
    }

    #[test]
    fn measurement_at_follow_up_flagged() {
        let mut data = tiny_dataset();
        data.subjects[0].meas_times = vec![1.0];
        let findings = validate_dataset(&data);
        assert!(findings
            .iter()
            .any(|v| v.rule.contains("at or after follow-up")));
    }

    #[test]
    fn all_censored_flagged() {
        let mut data = tiny_dataset();
        for s in &mut data.subjects {
            s.delta = false;
        }
        let findings = validate_dataset(&data);
        assert!(findings.iter().any(|v| v.rule == "no observed events"));
    }

    #[test]
    fn hazard_lookup() {
        let lam = StepCumHazard::new(vec![1.0, 2.0, 3.0], vec![0.5, 0.25, 0.125]).unwrap();
        assert_eq!(lam.value_at(0.5), 0.0);
        assert_eq!(lam.value_at(1.0), 0.5);
        assert_eq!(lam.value_at(2.5), 0.75);
        assert_eq!(lam.value_at(10.0), 0.875);
        assert_eq!(lam.jump_at(2.0), Some(0.25));
        assert_eq!(lam.jump_at(2.0 + 5e-13), Some(0.25));
        assert_eq!(lam.jump_at(2.5), None);
        assert_eq!(lam.n_jumps_up_to(2.0), 2);
    }

    #[test]
    fn hazard_rejects_bad_jumps() {
        assert!(StepCumHazard::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(StepCumHazard::new(vec![1.0], vec![0.0]).is_err());
        assert!(StepCumHazard::new(vec![1.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn theta_flatten_round_trip() {
        let spec = ModelSpec {
            p: 2,
            d_a: 2,
            r: 1,
            s: 2,
            tau: 3.0,
        };
        let theta = ThetaParams::new(
            0.5,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
            DVector::from_vec(vec![1.0, -0.5]),
            DVector::from_vec(vec![0.3]),
            DVector::from_vec(vec![0.7, -0.1]),
        );
        theta.validate(&spec).unwrap();
        let flat = theta.flatten();
        assert_eq!(flat.len(), spec.theta_dim());
        let back = ThetaParams::from_flat(&spec, &flat).unwrap();
        assert_eq!(back, theta);
        assert_eq!(ThetaParams::coord_names(&spec).len(), spec.theta_dim());
    }

    #[test]
    fn theta_validation_catches_bad_sigma() {
        let spec = ModelSpec {
            p: 1,
            d_a: 1,
            r: 1,
            s: 1,
            tau: 1.0,
        };
        let mut theta = ThetaParams::new(
            1.0,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
        );
        theta.validate(&spec).unwrap();
        theta.sigma_y = 0.0;
        assert!(theta.validate(&spec).is_err());
        theta.sigma_y = 1.0;
        theta.sigma_a[(0, 0)] = -1.0;
        assert!(theta.validate(&spec).is_err());
    }
}
