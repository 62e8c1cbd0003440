//! The attention vector field on `(E_W)^ℓ`, the discrete layer map, projected
//! RK4 integration and the gradient-flow quantities of the single-head,
//! symmetric positive-definite `P` case.
//!
//! With the standard projection, token `i` moves as
//!
//! ```text
//! ẏ_i = Σ_η Σ_j α_ij^η (U_η y_j − (y_iᵀ W U_η y_j) y_i)
//! ```
//!
//! With [`ProjectionKind::SpecialU`] (single head, constant invertible `U`,
//! `W = UᵀU`) the value matrix is absorbed into the projection and
//! `ẏ_i = Σ_j α_ij (y_j − (y_iᵀ W y_j) y_i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_matrix, HeadParameterSchedule, MatrixSchedule, Mask, Normalization,
};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::manifold::{
    project_columns, tangent_project_columns, MetricMatrix, TokenConfiguration, TokenVelocities,
    MANIFOLD_TOL,
};

/// Default consensus threshold on `E` for declaring convergence.
pub const CONVERGENCE_TOL: f64 = 1e-3;
/// Velocity W-norm under which a state counts as an equilibrium.
pub const EQUILIBRIUM_VELOCITY: f64 = 1e-8;
/// Tolerance for flagging initial data on a measure-zero exceptional set.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    #[default]
    Standard,
    SpecialU,
}

/// Everything needed to evaluate the vector field.
#[derive(Debug, Clone)]
pub struct FlowSpec {
    schedule: HeadParameterSchedule,
    metric: MetricMatrix,
    mask: Mask,
    normalization: Normalization,
    projection: ProjectionKind,
}

impl FlowSpec {
    pub fn new(
        schedule: HeadParameterSchedule,
        metric: MetricMatrix,
        mask: Mask,
        normalization: Normalization,
        projection: ProjectionKind,
    ) -> Result<Self> {
        let dim = metric.dim();
        schedule
            .validate(dim)
            .map_err(|e| Error::Contract(e.to_string()))?;
        if projection == ProjectionKind::SpecialU {
            if schedule.head_count() != 1 {
                return Err(Error::Contract(
                    "special projection requires exactly one head".into(),
                ));
            }
            let u = match &schedule.heads[0].value {
                MatrixSchedule::Constant { matrix } => matrix,
                _ => {
                    return Err(Error::Contract(
                        "special projection requires a constant value matrix".into(),
                    ))
                }
            };
            if u.clone().try_inverse().is_none() || u.determinant().abs() < 1e-300 {
                return Err(Error::Contract(
                    "special projection requires an invertible value matrix".into(),
                ));
            }
            let gap = (u.transpose() * u - metric.matrix()).amax();
            if gap > 1e-10 {
                return Err(Error::Contract(format!(
                    "special projection requires W = UᵀU (max deviation {gap:e})"
                )));
            }
        }
        Ok(Self {
            schedule,
            metric,
            mask,
            normalization,
            projection,
        })
    }

    /// Single head, `U = I`, `W = P`, full attention: the gradient flow of `V_P`.
    pub fn gradient(p: &MetricMatrix) -> Self {
        let dim = p.dim();
        Self {
            schedule: HeadParameterSchedule::single(
                MatrixSchedule::constant(p.matrix().clone()),
                MatrixSchedule::identity(dim),
            ),
            metric: p.clone(),
            mask: Mask::Full,
            normalization: Normalization::Scaled,
            projection: ProjectionKind::Standard,
        }
    }

    pub fn schedule(&self) -> &HeadParameterSchedule {
        &self.schedule
    }

    pub fn metric(&self) -> &MetricMatrix {
        &self.metric
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn projection(&self) -> ProjectionKind {
        self.projection
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    /// Un-projected drive `Σ_η Σ_j α_ij^η U_η y_j`, one column per token.
    /// Under the special projection the value matrix is dropped.
    fn drive(&self, t: f64, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut drive = DMatrix::zeros(points.nrows(), points.ncols());
        for head in self.schedule.evaluate(t) {
            let alpha = attention_matrix(&head.query_key, points, self.mask, self.normalization)?;
            match self.projection {
                ProjectionKind::Standard => {
                    let values = &head.value * points;
                    drive.gemm(1.0, &values, &alpha.transpose(), 1.0);
                }
                ProjectionKind::SpecialU => {
                    drive.gemm(1.0, points, &alpha.transpose(), 1.0);
                }
            }
        }
        Ok(drive)
    }

    /// Field evaluated at arbitrary (possibly off-manifold) RK stage points.
    fn field(&self, t: f64, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let drive = self.drive(t, points)?;
        Ok(tangent_project_columns(points, &drive, &self.metric))
    }
}

/// For a special-projection flow with value matrix `U`, the standard flow on
/// the unit sphere satisfied by `z = U y`: identity value matrix and logits
/// `z_iᵀ U⁻ᵀ P U⁻¹ z_j`. Returns that flow together with `U`.
pub fn coordinate_change_flow(spec: &FlowSpec) -> Result<(FlowSpec, DMatrix<f64>)> {
    if spec.projection != ProjectionKind::SpecialU {
        return Err(Error::Contract(
            "coordinate change applies to special-projection flows only".into(),
        ));
    }
    let head = &spec.schedule.heads[0];
    let u = head.value.eval(0.0);
    let u_inv = u
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Contract("value matrix is singular".into()))?;
    let query_key = MatrixSchedule::Congruence {
        left: u_inv.transpose(),
        inner: Box::new(head.query_key.clone()),
        right: u_inv,
    };
    let dim = spec.dim();
    let z_spec = FlowSpec::new(
        HeadParameterSchedule::single(query_key, MatrixSchedule::identity(dim)),
        MetricMatrix::identity(dim),
        spec.mask,
        spec.normalization,
        ProjectionKind::Standard,
    )?;
    Ok((z_spec, u))
}

fn check_shape(y: &TokenConfiguration, spec: &FlowSpec) -> Result<()> {
    if y.dim() != spec.dim() {
        return Err(Error::Contract(format!(
            "configuration has dimension {} but the flow has dimension {}",
            y.dim(),
            spec.dim()
        )));
    }
    Ok(())
}

/// Velocities of every token at time `t`.
pub fn vector_field(t: f64, y: &TokenConfiguration, spec: &FlowSpec) -> Result<TokenVelocities> {
    check_shape(y, spec)?;
    spec.field(t, y.points())
}

/// One layer of the discrete model:
/// `y_i ← π_W(y_i + τ Σ_η Σ_j α_ij^η U_η y_j)`, with the schedule read at
/// `t = layer · τ`.
pub fn discrete_step(
    y: &TokenConfiguration,
    layer: usize,
    spec: &FlowSpec,
    tau: f64,
) -> Result<TokenConfiguration> {
    check_shape(y, spec)?;
    if spec.projection != ProjectionKind::Standard {
        return Err(Error::Contract(
            "the discrete layer map is defined for the standard projection only".into(),
        ));
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("tau must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(y.clone());
    }
    let t = layer as f64 * tau;
    let drive = spec.drive(t, y.points())?;
    let mut next = y.points() + drive * tau;
    project_columns(&mut next, &spec.metric)?;
    Ok(TokenConfiguration::from_trusted(next))
}

/// Potential `V(x) = −½ Σ_{i,j} exp(x_iᵀ P x_j)` on ambient points (one per column).
pub fn potential_v(points: &DMatrix<f64>, p: &MetricMatrix) -> f64 {
    let logits = points.transpose() * (p.matrix() * points);
    -0.5 * logits.iter().map(|v| v.exp()).sum::<f64>()
}

/// Metric `Σ_i Z_i(y) X_iᵀ P Y_i` with `Z_i = √(n+1) Σ_j exp(y_iᵀ P y_j)`.
pub fn metric_inner(
    points: &DMatrix<f64>,
    x: &TokenVelocities,
    y: &TokenVelocities,
    p: &MetricMatrix,
) -> f64 {
    let scale = (points.nrows() as f64).sqrt();
    let logits = points.transpose() * (p.matrix() * points);
    (0..points.ncols())
        .map(|i| {
            let z = scale * logits.row(i).iter().map(|v| v.exp()).sum::<f64>();
            z * p.inner(&x.column(i), &y.column(i))
        })
        .sum()
}

/// Riemannian gradient of `V_P` on `(E_P)^ℓ`, which is the negated gradient-flow field.
pub fn riemannian_gradient_v(y: &TokenConfiguration, p: &MetricMatrix) -> Result<TokenVelocities> {
    let v = vector_field(0.0, y, &FlowSpec::gradient(p))?;
    Ok(-v)
}

/// Largest `|v_i|_W` over tokens.
pub fn max_velocity_norm(v: &TokenVelocities, metric: &MetricMatrix) -> f64 {
    v.column_iter()
        .map(|c| metric.inner(&c, &c).max(0.0).sqrt())
        .fold(0.0, f64::max)
}

/// Scalar quantities recorded along a trajectory at every accepted step.
#[derive(Debug, Clone, PartialEq)]
pub enum Observer {
    /// Consensus metric `E`.
    ConsensusE,
    /// Maximum pairwise Euclidean distance.
    Spread,
    /// `V_P` for the given query-key matrix.
    Potential { query_key: MetricMatrix },
    /// `max_i (1 − vᵀ y_i)`.
    HemisphereLyapunov { v: DVector<f64> },
    /// `referenceᵀ y_i` for every token.
    Alignments { reference: DVector<f64> },
    /// Frobenius norm of each `P_η(t)`.
    ScheduleFrobenius,
    /// Largest velocity W-norm.
    VelocityNorm,
}

impl Observer {
    pub fn columns(&self, ell: usize, heads: usize) -> Vec<String> {
        match self {
            Observer::ConsensusE => vec!["E".into()],
            Observer::Spread => vec!["spread".into()],
            Observer::Potential { .. } => vec!["V_P".into()],
            Observer::HemisphereLyapunov { .. } => vec!["V_hemisphere".into()],
            Observer::Alignments { .. } => (0..ell).map(|i| format!("align_{i}")).collect(),
            Observer::ScheduleFrobenius => (0..heads).map(|h| format!("frob_P{h}")).collect(),
            Observer::VelocityNorm => vec!["velocity".into()],
        }
    }

    fn observe(
        &self,
        t: f64,
        y: &TokenConfiguration,
        velocity: f64,
        spec: &FlowSpec,
        out: &mut Vec<f64>,
    ) {
        match self {
            Observer::ConsensusE => out.push(diagnostics::consensus_e(y)),
            Observer::Spread => out.push(diagnostics::pairwise_spread(y)),
            Observer::Potential { query_key } => out.push(potential_v(y.points(), query_key)),
            Observer::HemisphereLyapunov { v } => {
                out.push(diagnostics::hemisphere_lyapunov(y, v).value)
            }
            Observer::Alignments { reference } => {
                out.extend(y.points().column_iter().map(|c| reference.dot(&c)))
            }
            Observer::ScheduleFrobenius => out.extend(
                spec.schedule
                    .heads
                    .iter()
                    .map(|h| h.query_key.eval(t).norm()),
            ),
            Observer::VelocityNorm => out.push(velocity),
        }
    }
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    pub t_final: f64,
    pub dt: f64,
    /// Store every `store_every`-th state (the final state is always stored).
    pub store_every: usize,
    pub convergence_tol: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            t_final: 20.0,
            dt: 1e-2,
            store_every: 1,
            convergence_tol: CONVERGENCE_TOL,
        }
    }
}

/// Result of [`integrate`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Every accepted step, starting at 0.
    pub times: Vec<f64>,
    /// Times at which `states` were stored.
    pub state_times: Vec<f64>,
    pub states: Vec<TokenConfiguration>,
    pub observer_names: Vec<String>,
    /// One series per observer column, aligned with `times`.
    pub observations: Vec<Vec<f64>>,
    /// Largest `|y_iᵀ W y_i − 1|` seen at any accepted step.
    pub max_drift: f64,
    /// First time at which the convergence criterion held.
    pub converged_at: Option<f64>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.observer_names
            .iter()
            .position(|n| n == name)
            .map(|k| self.observations[k].as_slice())
    }

    pub fn final_state(&self) -> &TokenConfiguration {
        self.states.last().expect("trajectory always stores the initial state")
    }

    pub fn initial_state(&self) -> &TokenConfiguration {
        &self.states[0]
    }

    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }
}

/// Flags initial data on the exceptional sets excluded by the causal
/// convergence results: a token antipodal to the first one, or (single head,
/// constant symmetric `U`) a token orthogonal to the top eigenvector of `U`.
pub fn degenerate_initial_warnings(y0: &TokenConfiguration, spec: &FlowSpec) -> Vec<String> {
    let mut out = Vec::new();
    if spec.mask != Mask::Causal {
        return out;
    }
    let first = y0.points().column(0);
    for i in 1..y0.ell() {
        let yi = y0.points().column(i);
        let cos = first.dot(&yi) / (first.norm() * yi.norm());
        if (cos + 1.0).abs() < DEGENERACY_TOL {
            out.push(format!("token {i} starts antipodal to token 0"));
        }
    }
    if spec.projection == ProjectionKind::Standard && spec.schedule.head_count() == 1 {
        if let MatrixSchedule::Constant { matrix: u } = &spec.schedule.heads[0].value {
            let is_identity = *u == DMatrix::identity(u.nrows(), u.ncols());
            if !is_identity {
                if let Ok(top) = diagnostics::top_eigenpair(u, None) {
                    for (i, c) in y0.points().column_iter().enumerate() {
                        if top.vector.dot(&c).abs() < DEGENERACY_TOL {
                            out.push(format!(
                                "token {i} starts orthogonal to the top eigenvector of U"
                            ));
                        }
                    }
                }
            }
        }
    }
    out
}

fn first_non_finite(points: &DMatrix<f64>) -> Option<usize> {
    points
        .column_iter()
        .position(|c| c.iter().any(|v| !v.is_finite()))
}

/// Classical RK4 in ambient coordinates with every accepted step projected back
/// onto `(E_W)^ℓ`. Observers are evaluated at `t = 0` and after every step.
pub fn integrate(
    y0: &TokenConfiguration,
    spec: &FlowSpec,
    options: &IntegrationOptions,
    observers: &[Observer],
) -> Result<Trajectory> {
    check_shape(y0, spec)?;
    let IntegrationOptions {
        t_final,
        dt,
        store_every,
        convergence_tol,
    } = *options;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Contract(format!("dt must be positive, got {dt}")));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::Contract(format!("t_final must be >= 0, got {t_final}")));
    }
    let store_every = store_every.max(1);
    let metric = &spec.metric;
    let ell = y0.ell();

    let observer_names: Vec<String> = observers
        .iter()
        .flat_map(|o| o.columns(ell, spec.schedule.head_count()))
        .collect();
    let mut observations = vec![Vec::new(); observer_names.len()];
    let mut row = Vec::with_capacity(observer_names.len());

    let mut traj = Trajectory {
        times: Vec::new(),
        state_times: Vec::new(),
        states: Vec::new(),
        observer_names,
        observations: Vec::new(),
        max_drift: 0.0,
        converged_at: None,
        warnings: degenerate_initial_warnings(y0, spec),
    };
    for w in &traj.warnings {
        log::warn!("{w}");
    }

    let steps = if t_final == 0.0 {
        0
    } else {
        let n = (t_final / dt).round();
        if (n * dt - t_final).abs() <= 1e-9 * t_final {
            n as usize
        } else {
            (t_final / dt).ceil() as usize
        }
    };

    let mut y = y0.points().clone();
    let mut t = 0.0;
    let mut k1 = spec.field(t, &y)?;
    for step in 0..=steps {
        let config = TokenConfiguration::from_trusted(y.clone());
        let velocity = max_velocity_norm(&k1, metric);
        row.clear();
        for o in observers {
            o.observe(t, &config, velocity, spec, &mut row);
        }
        for (series, v) in observations.iter_mut().zip(&row) {
            series.push(*v);
        }
        traj.max_drift = traj.max_drift.max(metric.max_drift(&y));
        if traj.converged_at.is_none()
            && (velocity < EQUILIBRIUM_VELOCITY || diagnostics::consensus_e(&config) < convergence_tol)
        {
            traj.converged_at = Some(t);
        }
        traj.times.push(t);
        if step % store_every == 0 || step == steps {
            traj.state_times.push(t);
            traj.states.push(config);
        }
        if step == steps {
            break;
        }

        let t_next = if step + 1 == steps {
            t_final
        } else {
            (step + 1) as f64 * dt
        };
        let h = t_next - t;
        let half = 0.5 * h;
        let k2 = spec.field(t + half, &(&y + &k1 * half))?;
        let k3 = spec.field(t + half, &(&y + &k2 * half))?;
        let k4 = spec.field(t + h, &(&y + &k3 * h))?;
        let mut next = &y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if let Some(token) = first_non_finite(&next) {
            return Err(Error::Integration { time: t_next, token });
        }
        project_columns(&mut next, metric).map_err(|_| Error::Integration {
            time: t_next,
            token: first_non_finite(&next).unwrap_or(0),
        })?;
        y = next;
        t = t_next;
        k1 = spec.field(t, &y)?;
    }

    if traj.max_drift > MANIFOLD_TOL {
        let msg = format!("manifold drift {:e} exceeded tolerance", traj.max_drift);
        log::warn!("{msg}");
        traj.warnings.push(msg);
    }
    traj.observations = observations;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Sinusoid, Trig};
    use crate::manifold::sample_box_projected;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, dim: usize, half: f64) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-half..half))
    }

    fn random_spd(rng: &mut impl Rng, dim: usize) -> MetricMatrix {
        let a = random_matrix(rng, dim, 0.5);
        MetricMatrix::new(a.transpose() * &a + DMatrix::identity(dim, dim) * 0.3).unwrap()
    }

    fn sphere_spec(schedule: HeadParameterSchedule, dim: usize, mask: Mask) -> FlowSpec {
        FlowSpec::new(
            schedule,
            MetricMatrix::identity(dim),
            mask,
            Normalization::Scaled,
            ProjectionKind::Standard,
        )
        .unwrap()
    }

    fn identity_heads(rng: &mut impl Rng, dim: usize, heads: usize) -> HeadParameterSchedule {
        HeadParameterSchedule {
            heads: (0..heads)
                .map(|_| crate::attention::HeadSchedule {
                    query_key: MatrixSchedule::constant(random_matrix(rng, dim, 0.5)),
                    value: MatrixSchedule::identity(dim),
                })
                .collect(),
            norm_bound: None,
        }
    }

    #[test]
    fn consensus_is_an_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y1 = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let pts = DMatrix::from_columns(&[y1.clone(), y1.clone(), y1.clone(), y1]);
        let y = TokenConfiguration::new(pts, &MetricMatrix::identity(3)).unwrap();
        for mask in [Mask::Full, Mask::Causal] {
            let spec = sphere_spec(identity_heads(&mut rng, 3, 2), 3, mask);
            let v = vector_field(0.3, &y, &spec).unwrap();
            assert!(v.amax() < 1e-15);
        }
    }

    #[test]
    fn causal_first_token_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 2), 3, Mask::Causal);
        let mut y = sample_box_projected(&mut rng, 5, &MetricMatrix::identity(3), 0.5)
            .unwrap()
            .into_points();
        y.set_column(0, &DVector::from_vec(vec![0.0, 1.0, 0.0]));
        let y = TokenConfiguration::new(y, &MetricMatrix::identity(3)).unwrap();
        let v = vector_field(0.0, &y, &spec).unwrap();
        assert!(v.column(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_orthogonal_tokens_on_the_circle() {
        let schedule = HeadParameterSchedule::single(
            MatrixSchedule::constant(DMatrix::zeros(2, 2)),
            MatrixSchedule::identity(2),
        );
        let spec = sphere_spec(schedule, 2, Mask::Full);
        let y = TokenConfiguration::new(DMatrix::identity(2, 2), &MetricMatrix::identity(2)).unwrap();
        let v = vector_field(0.0, &y, &spec).unwrap();
        let c = 1.0 / (2.0 * 2f64.sqrt());
        let want = DMatrix::from_column_slice(2, 2, &[0.0, c, c, 0.0]);
        assert!((v - want).amax() < 1e-16);
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 1), 3, Mask::Full);
        let y = TokenConfiguration::new(DMatrix::identity(2, 2), &MetricMatrix::identity(2)).unwrap();
        assert!(matches!(vector_field(0.0, &y, &spec), Err(Error::Contract(_))));
    }

    #[test]
    fn discrete_step_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 2), 3, Mask::Full);
        let y = sample_box_projected(&mut rng, 6, &MetricMatrix::identity(3), 0.5).unwrap();
        assert_eq!(discrete_step(&y, 3, &spec, 0.0).unwrap(), y);

        let y1 = DVector::from_vec(vec![0.48, 0.6, 0.64]);
        let y1: DVector<f64> = &y1 / y1.norm();
        let pts = DMatrix::from_columns(&[y1.clone(), y1.clone(), y1]);
        let cons = TokenConfiguration::new(pts, &MetricMatrix::identity(3)).unwrap();
        for tau in [0.01, 0.5, 3.0] {
            let next = discrete_step(&cons, 0, &spec, tau).unwrap();
            assert!((next.points() - cons.points()).amax() < 1e-12);
        }
    }

    #[test]
    fn potential_examples() {
        let p = random_spd(&mut ChaCha8Rng::seed_from_u64(5), 3);
        let x = p.project(&DVector::from_vec(vec![0.3, -1.0, 0.2])).unwrap();
        let single = DMatrix::from_columns(&[x.clone()]);
        let e = 1f64.exp();
        assert!((potential_v(&single, &p) + e / 2.0).abs() < 1e-14);
        let ell = 4;
        let cons = DMatrix::from_columns(&vec![x; ell]);
        let want = -((ell * ell) as f64) * e / 2.0;
        assert!((potential_v(&cons, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_negated_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_spd(&mut rng, 4);
        let y = sample_box_projected(&mut rng, 5, &p, 0.5).unwrap();
        let g = riemannian_gradient_v(&y, &p).unwrap();
        let v = vector_field(0.0, &y, &FlowSpec::gradient(&p)).unwrap();
        assert!((g + v).amax() <= 1e-14);

        let x = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let x = p.project(&x).unwrap();
        let cons = TokenConfiguration::new(DMatrix::from_columns(&[x.clone(), x]), &p).unwrap();
        assert!(riemannian_gradient_v(&cons, &p).unwrap().amax() < 1e-15);
    }

    #[test]
    fn metric_inner_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_spd(&mut rng, 3);
        let y = sample_box_projected(&mut rng, 4, &p, 0.5).unwrap();
        let zero = DMatrix::zeros(3, 4);
        let x = tangent_project_columns(y.points(), &random_matrix(&mut rng, 3, 1.0).resize(3, 4, 0.3), &p);
        let z = tangent_project_columns(y.points(), &DMatrix::from_fn(3, 4, |i, j| (i * j) as f64 - 1.0), &p);
        assert_eq!(metric_inner(y.points(), &zero, &x, &p), 0.0);
        let a = metric_inner(y.points(), &x, &z, &p);
        let b = metric_inner(y.points(), &z, &x, &p);
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        for _ in 0..1000 {
            let raw = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
            let t = tangent_project_columns(y.points(), &raw, &p);
            if t.amax() > 0.0 {
                assert!(metric_inner(y.points(), &t, &t, &p) > 0.0);
            }
        }
    }

    #[test]
    fn special_projection_validation() {
        let u = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let w = MetricMatrix::new(u.transpose() * &u).unwrap();
        let schedule = HeadParameterSchedule::single(
            MatrixSchedule::constant(DMatrix::identity(2, 2)),
            MatrixSchedule::constant(u.clone()),
        );
        assert!(FlowSpec::new(schedule.clone(), w, Mask::Causal, Normalization::Scaled, ProjectionKind::SpecialU).is_ok());
        let bad = FlowSpec::new(
            schedule.clone(),
            MetricMatrix::identity(2),
            Mask::Causal,
            Normalization::Scaled,
            ProjectionKind::SpecialU,
        );
        assert!(matches!(bad, Err(Error::Contract(_))));
        let singular = HeadParameterSchedule::single(
            MatrixSchedule::constant(DMatrix::identity(2, 2)),
            MatrixSchedule::constant(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])),
        );
        assert!(FlowSpec::new(singular, MetricMatrix::identity(2), Mask::Causal, Normalization::Scaled, ProjectionKind::SpecialU).is_err());
    }

    #[test]
    fn integrate_zero_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 1), 3, Mask::Full);
        let y = sample_box_projected(&mut rng, 4, &MetricMatrix::identity(3), 0.5).unwrap();
        let opts = IntegrationOptions { t_final: 0.0, ..Default::default() };
        let traj = integrate(&y, &spec, &opts, &[Observer::ConsensusE]).unwrap();
        assert_eq!(traj.times, vec![0.0]);
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.final_state(), &y);
        assert_eq!(traj.series("E").unwrap().len(), 1);
    }

    #[test]
    fn integrate_rejects_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 1), 3, Mask::Full);
        let y = sample_box_projected(&mut rng, 4, &MetricMatrix::identity(3), 0.5).unwrap();
        for dt in [0.0, -1.0, f64::NAN] {
            let opts = IntegrationOptions { dt, ..Default::default() };
            assert!(matches!(integrate(&y, &spec, &opts, &[]), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn integrate_aborts_on_blow_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let huge = HeadParameterSchedule::single(
            MatrixSchedule::constant(DMatrix::identity(3, 3)),
            MatrixSchedule::constant(DMatrix::identity(3, 3) * 1e308),
        );
        let spec = sphere_spec(huge, 3, Mask::Full);
        let y = sample_box_projected(&mut rng, 3, &MetricMatrix::identity(3), 0.5).unwrap();
        let opts = IntegrationOptions { t_final: 1.0, dt: 0.1, ..Default::default() };
        match integrate(&y, &spec, &opts, &[]) {
            Err(Error::Integration { time, .. }) => assert!(time > 0.0),
            Err(Error::Numeric(_)) => {}
            other => panic!("expected an integration failure, got {other:?}"),
        }
    }

    #[test]
    fn integrate_partial_last_step_and_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 1), 3, Mask::Full);
        let y = sample_box_projected(&mut rng, 4, &MetricMatrix::identity(3), 0.5).unwrap();
        let opts = IntegrationOptions { t_final: 1.05, dt: 0.1, store_every: 4, ..Default::default() };
        let traj = integrate(&y, &spec, &opts, &[Observer::Spread]).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 1.05);
        assert_eq!(traj.times.len(), 12);
        assert_eq!(*traj.state_times.last().unwrap(), 1.05);
        assert_eq!(traj.state_times[..3], [0.0, 0.4, 0.8]);
    }

    #[test]
    fn degenerate_initial_data_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = sphere_spec(identity_heads(&mut rng, 3, 1), 3, Mask::Causal);
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let y = TokenConfiguration::new(DMatrix::from_columns(&[a.clone(), b, -a]), &MetricMatrix::identity(3)).unwrap();
        let w = degenerate_initial_warnings(&y, &spec);
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("token 2"));

        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0]));
        let sym = sphere_spec(
            HeadParameterSchedule::single(MatrixSchedule::constant(DMatrix::zeros(3, 3)), MatrixSchedule::constant(u)),
            3,
            Mask::Causal,
        );
        let y = TokenConfiguration::new(
            DMatrix::from_columns(&[DVector::from_vec(vec![0.6, 0.8, 0.0]), DVector::from_vec(vec![0.0, 0.0, 1.0])]),
            &MetricMatrix::identity(3),
        )
        .unwrap();
        let w = degenerate_initial_warnings(&y, &sym);
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("orthogonal"));
    }

    fn modulated(rng: &mut impl Rng, dim: usize) -> MatrixSchedule {
        MatrixSchedule::DiagonalModulated {
            diagonal: (0..dim)
                .map(|k| Sinusoid { amplitude: 2.0, freq: 1.0 + k as f64, phase: 0.3, trig: Trig::Cos })
                .collect(),
            base: random_matrix(rng, dim, 0.5),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn field_is_tangent(seed in any::<u64>(), causal in any::<bool>(), special in any::<bool>(), t in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = rng.random_range(2..5);
            let ell = rng.random_range(1..6);
            let mask = if causal { Mask::Causal } else { Mask::Full };
            let spec = if special {
                let mut u = random_matrix(&mut rng, dim, 0.5);
                u += DMatrix::identity(dim, dim);
                let w = MetricMatrix::new({ let g = u.transpose() * &u; (&g + g.transpose()) * 0.5 }).unwrap();
                FlowSpec::new(
                    HeadParameterSchedule::single(modulated(&mut rng, dim), MatrixSchedule::constant(u)),
                    w, mask, Normalization::Scaled, ProjectionKind::SpecialU,
                ).unwrap()
            } else {
                let w = random_spd(&mut rng, dim);
                let heads = HeadParameterSchedule {
                    heads: (0..2).map(|_| crate::attention::HeadSchedule {
                        query_key: modulated(&mut rng, dim),
                        value: MatrixSchedule::constant(random_matrix(&mut rng, dim, 1.0)),
                    }).collect(),
                    norm_bound: None,
                };
                FlowSpec::new(heads, w, mask, Normalization::Scaled, ProjectionKind::Standard).unwrap()
            };
            let y = sample_box_projected(&mut rng, ell, spec.metric(), 0.5).unwrap();
            let v = vector_field(t, &y, &spec).unwrap();
            for i in 0..ell {
                prop_assert!(spec.metric().inner(&y.points().column(i), &v.column(i)).abs() < 1e-12);
            }
        }
    }
}
