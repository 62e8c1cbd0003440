//! Declarative scenario configs, the built-in scenario library, random matrix
//! construction and result files.
//!
//! A scenario is fully determined by its config and seed: every random draw
//! comes from one `ChaCha8Rng` seeded with `seed`, consumed in a fixed order
//! (per head: query-key base, modulation, value; then the initial tokens).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    operator_norm, HeadParameterSchedule, HeadSchedule, MatrixSchedule, Mask, Normalization,
    Sinusoid, Trig, NORM_BOUND_SAMPLES,
};
use crate::diagnostics::{consensus_e, pairwise_spread, top_eigenpair};
use crate::dynamics::{
    coordinate_change_flow, integrate, FlowSpec, IntegrationOptions, Observer, ProjectionKind,
    Trajectory, CONVERGENCE_TOL,
};
use crate::error::{Error, Result};
use crate::manifold::{
    sample_box_projected_where, MetricMatrix, TokenConfiguration,
};
use crate::rows::{from_rows, to_rows};

/// Default half-width of the uniform box for random matrices and tokens.
pub const DEFAULT_HALF_WIDTH: f64 = 0.5;
/// Default eigenvalue floor for random symmetric positive-definite matrices.
pub const DEFAULT_SPD_MARGIN: f64 = 0.1;
const MAX_REJECTIONS: usize = 10_000;

fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}

fn default_margin() -> f64 {
    DEFAULT_SPD_MARGIN
}

fn default_amplitude() -> f64 {
    2.0
}

/// Random matrix construction protocols. Entries are drawn i.i.d. uniform on
/// `[-half_width, half_width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RandomMatrixSpec {
    UniformBox {
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    /// `A + Aᵀ`.
    Symmetrized {
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    /// `A + Aᵀ + (|λ_min| + margin)·I`, so `λ_min ≥ margin`.
    SymmetricPositiveDefinite {
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Uniform box draws rejected until the 2-norm condition number is below `max_condition`.
    Invertible {
        #[serde(default = "default_half_width")]
        half_width: f64,
        max_condition: f64,
    },
}

fn uniform_box<R: Rng + ?Sized>(rng: &mut R, dim: usize, half_width: f64) -> DMatrix<f64> {
    // Row-major draw order so a printed matrix reads in sampling order.
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            m[(i, j)] = rng.random_range(-half_width..=half_width);
        }
    }
    m
}

impl RandomMatrixSpec {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Result<DMatrix<f64>> {
        match *self {
            RandomMatrixSpec::UniformBox { half_width } => Ok(uniform_box(rng, dim, half_width)),
            RandomMatrixSpec::Symmetrized { half_width } => {
                let a = uniform_box(rng, dim, half_width);
                Ok(&a + a.transpose())
            }
            RandomMatrixSpec::SymmetricPositiveDefinite { half_width, margin } => {
                let a = uniform_box(rng, dim, half_width);
                let s = &a + a.transpose();
                let lambda_min = s.clone().symmetric_eigenvalues().min();
                Ok(s + DMatrix::identity(dim, dim) * (lambda_min.abs() + margin))
            }
            RandomMatrixSpec::Invertible {
                half_width,
                max_condition,
            } => {
                for _ in 0..MAX_REJECTIONS {
                    let a = uniform_box(rng, dim, half_width);
                    let sv = a.clone().svd(false, false).singular_values;
                    if sv.min() > 0.0 && sv.max() / sv.min() < max_condition {
                        return Ok(a);
                    }
                }
                Err(Error::Config(format!(
                    "no matrix with condition number < {max_condition} after {MAX_REJECTIONS} draws"
                )))
            }
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let (half_width, extra) = match *self {
            RandomMatrixSpec::UniformBox { half_width }
            | RandomMatrixSpec::Symmetrized { half_width } => (half_width, None),
            RandomMatrixSpec::SymmetricPositiveDefinite { half_width, margin } => {
                (half_width, Some(("margin", margin, 0.0)))
            }
            RandomMatrixSpec::Invertible {
                half_width,
                max_condition,
            } => (half_width, Some(("max_condition", max_condition, 1.0))),
        };
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Config(format!("{what}: half_width must be positive")));
        }
        if let Some((name, value, floor)) = extra {
            if !(value > floor && value.is_finite()) {
                return Err(Error::Config(format!("{what}: {name} must exceed {floor}")));
            }
        }
        Ok(())
    }
}

/// Where a constant matrix comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatrixSource {
    Identity,
    Explicit {
        #[serde(with = "crate::rows")]
        matrix: DMatrix<f64>,
    },
    Random { spec: RandomMatrixSpec },
}

impl MatrixSource {
    fn realize<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            MatrixSource::Identity => Ok(DMatrix::identity(dim, dim)),
            MatrixSource::Explicit { matrix } => Ok(matrix.clone()),
            MatrixSource::Random { spec } => spec.sample(rng, dim),
        }
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        match self {
            MatrixSource::Identity => Ok(()),
            MatrixSource::Explicit { matrix } => {
                if matrix.nrows() != dim || matrix.ncols() != dim {
                    return Err(Error::Config(format!(
                        "{what} is {}x{}, expected {dim}x{dim}",
                        matrix.nrows(),
                        matrix.ncols()
                    )));
                }
                if matrix.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("{what} has non-finite entries")));
                }
                Ok(())
            }
            MatrixSource::Random { spec } => spec.validate(what),
        }
    }
}

/// Diagonal time modulation `D(t)` applied to a head's query-key matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModulationSpec {
    /// Explicit diagonal entries.
    Sinusoids { entries: Vec<Sinusoid> },
    /// `|amplitude · sin(w t + φ)|` per entry with `w ~ U(0,1)` and `φ ~ U(0,2π)`.
    RandomAbsSin {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

impl ModulationSpec {
    fn realize<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Vec<Sinusoid> {
        match self {
            ModulationSpec::Sinusoids { entries } => entries.clone(),
            ModulationSpec::RandomAbsSin { amplitude } => (0..dim)
                .map(|_| {
                    let w: f64 = rng.random_range(0.0..1.0);
                    let phase: f64 = rng.random_range(0.0..2.0 * PI);
                    Sinusoid {
                        amplitude: *amplitude,
                        freq: w / PI,
                        phase,
                        trig: Trig::AbsSin,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Constant part `P′` of the query-key matrix.
    pub query_key: MatrixSource,
    /// When present, `P(t) = D(t) P′`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulation: Option<ModulationSpec>,
    #[serde(default = "identity_source")]
    pub value: MatrixSource,
}

fn identity_source() -> MatrixSource {
    MatrixSource::Identity
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricSpec {
    #[default]
    Identity,
    Explicit {
        #[serde(with = "crate::rows")]
        matrix: DMatrix<f64>,
    },
    /// `W = P` for the given head's constant query-key matrix.
    FromP {
        #[serde(default)]
        head: usize,
    },
    /// `W = UᵀU` for the given head's value matrix.
    FromUtu {
        #[serde(default)]
        head: usize,
    },
}

/// A fixed direction used by observers and initial sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceSpec {
    /// The initial first token (observers only).
    FirstToken,
    /// Top eigenvector of the first head's symmetric value matrix, optionally negated.
    UTop {
        #[serde(default)]
        negate: bool,
    },
    /// An explicit vector, normalized to unit Euclidean length.
    Vector { vector: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSpec {
    /// Uniform box draws projected onto `E_W`; with `hemisphere`, each token is
    /// redrawn until `vᵀ y > 0`.
    BoxProjected {
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hemisphere: Option<ReferenceSpec>,
    },
    /// One row per token; rows are projected onto `E_W`.
    Explicit { points: Vec<Vec<f64>> },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::BoxProjected {
            half_width: DEFAULT_HALF_WIDTH,
            hemisphere: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObserverSpec {
    ConsensusE,
    Spread,
    /// `V_P` for the given head's constant symmetric positive-definite query-key matrix.
    Potential {
        #[serde(default)]
        head: usize,
    },
    Hemisphere { reference: ReferenceSpec },
    Alignments { reference: ReferenceSpec },
    ScheduleFrobenius,
    VelocityNorm,
}

fn default_store_every() -> usize {
    1
}

fn default_convergence_tol() -> f64 {
    CONVERGENCE_TOL
}

fn default_t_final() -> f64 {
    IntegrationOptions::default().t_final
}

fn default_dt() -> f64 {
    IntegrationOptions::default().dt
}

fn default_observers() -> Vec<ObserverSpec> {
    vec![ObserverSpec::ConsensusE, ObserverSpec::Spread]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub ell: usize,
    /// Ambient dimension `n + 1`.
    pub dim: usize,
    #[serde(default)]
    pub mask: Mask,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub projection: ProjectionKind,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Store every k-th state in `states.csv`; observers are recorded at every step.
    #[serde(default = "default_store_every")]
    pub store_every: usize,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "default_observers")]
    pub observers: Vec<ObserverSpec>,
    pub heads: Vec<HeadSpec>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn integration_options(&self) -> IntegrationOptions {
        IntegrationOptions {
            t_final: self.t_final,
            dt: self.dt,
            store_every: self.store_every,
            convergence_tol: self.convergence_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad(format!(
                "name must be nonempty and use [A-Za-z0-9_-] only, got {:?}",
                self.name
            ));
        }
        if self.ell == 0 {
            return bad("ell must be >= 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final must be >= 0, got {}", self.t_final));
        }
        if self.store_every == 0 {
            return bad("store_every must be >= 1".into());
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive".into());
        }
        if self.heads.is_empty() {
            return bad("at least one head is required".into());
        }
        for (h, head) in self.heads.iter().enumerate() {
            head.query_key
                .validate(self.dim, &format!("heads[{h}].query_key"))?;
            head.value.validate(self.dim, &format!("heads[{h}].value"))?;
            if let Some(ModulationSpec::Sinusoids { entries }) = &head.modulation {
                if entries.len() != self.dim {
                    return bad(format!(
                        "heads[{h}].modulation has {} entries, expected {}",
                        entries.len(),
                        self.dim
                    ));
                }
            }
        }
        let head_ok = |head: usize, what: &str| {
            if head >= self.heads.len() {
                Err(Error::Config(format!("{what} refers to missing head {head}")))
            } else {
                Ok(())
            }
        };
        match &self.metric {
            MetricSpec::FromP { head } => head_ok(*head, "metric")?,
            MetricSpec::FromUtu { head } => head_ok(*head, "metric")?,
            MetricSpec::Explicit { matrix } => {
                MatrixSource::Explicit {
                    matrix: matrix.clone(),
                }
                .validate(self.dim, "metric")?;
            }
            MetricSpec::Identity => {}
        }
        match &self.init {
            InitSpec::BoxProjected {
                half_width,
                hemisphere,
            } => {
                if !(*half_width > 0.0 && half_width.is_finite()) {
                    return bad("init.half_width must be positive".into());
                }
                match hemisphere {
                    Some(ReferenceSpec::FirstToken) => {
                        return bad("init.hemisphere cannot refer to the first token".into())
                    }
                    Some(r) => self.validate_reference(r, "init.hemisphere")?,
                    None => {}
                }
            }
            InitSpec::Explicit { points } => {
                if points.len() != self.ell {
                    return bad(format!(
                        "init.points has {} rows, expected ell = {}",
                        points.len(),
                        self.ell
                    ));
                }
                if let Some(i) = points.iter().position(|p| p.len() != self.dim) {
                    return bad(format!("init.points[{i}] does not have {} entries", self.dim));
                }
            }
        }
        for o in &self.observers {
            match o {
                ObserverSpec::Potential { head } => head_ok(*head, "potential observer")?,
                ObserverSpec::Hemisphere { reference } | ObserverSpec::Alignments { reference } => {
                    self.validate_reference(reference, "observer reference")?
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn validate_reference(&self, r: &ReferenceSpec, what: &str) -> Result<()> {
        if let ReferenceSpec::Vector { vector } = r {
            if vector.len() != self.dim {
                return Err(Error::Config(format!(
                    "{what} has {} entries, expected {}",
                    vector.len(),
                    self.dim
                )));
            }
            if !(vector.iter().all(|v| v.is_finite()) && vector.iter().any(|&v| v != 0.0)) {
                return Err(Error::Config(format!("{what} must be finite and nonzero")));
            }
        }
        Ok(())
    }
}

/// Matrices and vectors constructed while building a scenario, for the record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructedMatrices {
    pub heads: Vec<HeadSchedule>,
    pub metric: Vec<Vec<f64>>,
    /// One row per token.
    pub initial_tokens: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hemisphere_reference: Option<Vec<f64>>,
}

/// A validated, fully materialized scenario.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub config: ScenarioConfig,
    pub spec: FlowSpec,
    pub initial: TokenConfiguration,
    pub observers: Vec<Observer>,
    pub constructed: ConstructedMatrices,
    pub warnings: Vec<String>,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Contract(m) | Error::Domain(m) | Error::Numeric(m) => Error::Config(m),
        other => other,
    }
}

fn resolve_reference(
    r: &ReferenceSpec,
    heads: &[HeadSchedule],
    initial: Option<&TokenConfiguration>,
) -> Result<DVector<f64>> {
    let v = match r {
        ReferenceSpec::Vector { vector } => DVector::from_column_slice(vector),
        ReferenceSpec::FirstToken => initial
            .expect("first-token reference resolved after sampling")
            .token(0),
        ReferenceSpec::UTop { negate } => {
            let u = match &heads[0].value {
                MatrixSchedule::Constant { matrix } => matrix,
                _ => return Err(Error::Config("u-top needs a constant value matrix".into())),
            };
            let top = top_eigenpair(u, None).map_err(config_err)?;
            if !top.multiplicity_ok {
                return Err(Error::Config(
                    "the top eigenvalue of U is not simple".into(),
                ));
            }
            if *negate {
                -top.vector
            } else {
                top.vector
            }
        }
    };
    let norm = v.norm();
    Ok(v / norm)
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<BuiltScenario> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warnings = Vec::new();

    let mut heads = Vec::with_capacity(cfg.heads.len());
    for head in &cfg.heads {
        let base = head.query_key.realize(&mut rng, dim)?;
        let query_key = match &head.modulation {
            None => MatrixSchedule::constant(base),
            Some(m) => MatrixSchedule::DiagonalModulated {
                diagonal: m.realize(&mut rng, dim),
                base,
            },
        };
        let value = MatrixSchedule::constant(head.value.realize(&mut rng, dim)?);
        heads.push(HeadSchedule { query_key, value });
    }

    let metric = match &cfg.metric {
        MetricSpec::Identity => MetricMatrix::identity(dim),
        MetricSpec::Explicit { matrix } => MetricMatrix::new(matrix.clone()).map_err(config_err)?,
        MetricSpec::FromP { head } => match &heads[*head].query_key {
            MatrixSchedule::Constant { matrix } => MetricMatrix::new(matrix.clone())
                .map_err(|e| Error::Config(format!("metric from-p: {}", config_err(e))))?,
            _ => {
                return Err(Error::Config(
                    "metric from-p needs a constant query-key matrix".into(),
                ))
            }
        },
        MetricSpec::FromUtu { head } => {
            let u = heads[*head].value.eval(0.0);
            let g = u.transpose() * &u;
            let g = (&g + g.transpose()) * 0.5;
            MetricMatrix::new(g)
                .map_err(|e| Error::Config(format!("metric from-utu: {}", config_err(e))))?
        }
    };

    let schedule = HeadParameterSchedule {
        heads: heads.clone(),
        norm_bound: cfg.norm_bound,
    };
    if let Some(v) = schedule.check_norm_bound(cfg.t_final, NORM_BOUND_SAMPLES) {
        warnings.push(format!(
            "head {} exceeds the declared norm bound: {} > {} at t = {}",
            v.head, v.norm, v.bound, v.t
        ));
    }
    let spec = FlowSpec::new(
        schedule,
        metric.clone(),
        cfg.mask,
        cfg.normalization,
        cfg.projection,
    )
    .map_err(config_err)?;

    let mut hemisphere_reference = None;
    let initial = match &cfg.init {
        InitSpec::BoxProjected {
            half_width,
            hemisphere,
        } => match hemisphere {
            None => sample_box_projected_where(&mut rng, cfg.ell, &metric, *half_width, |_| true),
            Some(r) => {
                let v = resolve_reference(r, &heads, None)?;
                let out = sample_box_projected_where(&mut rng, cfg.ell, &metric, *half_width, |y| {
                    v.dot(y) > 0.0
                });
                hemisphere_reference = Some(v.iter().copied().collect());
                out
            }
        }
        .map_err(config_err)?,
        InitSpec::Explicit { points } => {
            let rows = from_rows(points).map_err(Error::Config)?;
            TokenConfiguration::from_ambient(rows.transpose(), &metric).map_err(config_err)?
        }
    };

    let observers = cfg
        .observers
        .iter()
        .map(|o| {
            Ok(match o {
                ObserverSpec::ConsensusE => Observer::ConsensusE,
                ObserverSpec::Spread => Observer::Spread,
                ObserverSpec::ScheduleFrobenius => Observer::ScheduleFrobenius,
                ObserverSpec::VelocityNorm => Observer::VelocityNorm,
                ObserverSpec::Potential { head } => match &heads[*head].query_key {
                    MatrixSchedule::Constant { matrix } => Observer::Potential {
                        query_key: MetricMatrix::new(matrix.clone()).map_err(|e| {
                            Error::Config(format!("potential observer: {}", config_err(e)))
                        })?,
                    },
                    _ => {
                        return Err(Error::Config(
                            "potential observer needs a constant query-key matrix".into(),
                        ))
                    }
                },
                ObserverSpec::Hemisphere { reference } => Observer::HemisphereLyapunov {
                    v: resolve_reference(reference, &heads, Some(&initial))?,
                },
                ObserverSpec::Alignments { reference } => Observer::Alignments {
                    reference: resolve_reference(reference, &heads, Some(&initial))?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let constructed = ConstructedMatrices {
        heads,
        metric: to_rows(metric.matrix()),
        initial_tokens: to_rows(&initial.points().transpose()),
        hemisphere_reference,
    };
    Ok(BuiltScenario {
        config: cfg.clone(),
        spec,
        initial,
        observers,
        constructed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_e: f64,
    pub final_spread: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged_at: Option<f64>,
    pub steps: usize,
    pub max_manifold_drift: f64,
    /// For special-projection runs: `max_t |U y(t) − z(t)|` over stored states
    /// against the equivalent flow in `z = U y` coordinates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coordinate_change_deviation: Option<f64>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub built: BuiltScenario,
    pub trajectory: Trajectory,
    pub summary: RunSummary,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let start = Instant::now();
    let built = build_scenario(cfg)?;
    let options = cfg.integration_options();
    let trajectory = integrate(&built.initial, &built.spec, &options, &built.observers)?;

    let coordinate_change_deviation = if cfg.projection == ProjectionKind::SpecialU {
        let (z_spec, u) = coordinate_change_flow(&built.spec)?;
        let z0 = TokenConfiguration::from_ambient(&u * built.initial.points(), z_spec.metric())?;
        let z = integrate(&z0, &z_spec, &options, &[])?;
        let dev = trajectory
            .states
            .iter()
            .zip(&z.states)
            .map(|(y, z)| (&u * y.points() - z.points()).amax())
            .fold(0.0, f64::max);
        Some(dev)
    } else {
        None
    };

    let last = trajectory.final_state();
    let mut warnings = built.warnings.clone();
    warnings.extend(trajectory.warnings.iter().cloned());
    let summary = RunSummary {
        final_e: consensus_e(last),
        final_spread: pairwise_spread(last),
        converged: trajectory.converged(),
        converged_at: trajectory.converged_at,
        steps: trajectory.times.len() - 1,
        max_manifold_drift: trajectory.max_drift,
        coordinate_change_deviation,
        warnings,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(ScenarioRun {
        built,
        trajectory,
        summary,
    })
}

fn fmt_num(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// Writes `states.csv`, `observers.csv` and `summary.json` under
/// `<root>/<name>/<seed>/` and returns that directory.
pub fn write_outputs(run: &ScenarioRun, root: &Path) -> Result<PathBuf> {
    let cfg = &run.built.config;
    let dir = root.join(&cfg.name).join(cfg.seed.to_string());
    fs::create_dir_all(&dir)?;
    let traj = &run.trajectory;

    let mut states = String::from("t,token_index");
    for k in 0..cfg.dim {
        let _ = write!(states, ",x_{k}");
    }
    states.push('\n');
    for (t, s) in traj.state_times.iter().zip(&traj.states) {
        for (i, col) in s.points().column_iter().enumerate() {
            fmt_num(&mut states, *t);
            let _ = write!(states, ",{i}");
            for v in col.iter() {
                states.push(',');
                fmt_num(&mut states, *v);
            }
            states.push('\n');
        }
    }
    fs::write(dir.join("states.csv"), states)?;

    let mut obs = String::from("t");
    for name in &traj.observer_names {
        obs.push(',');
        obs.push_str(name);
    }
    obs.push('\n');
    for (k, t) in traj.times.iter().enumerate() {
        fmt_num(&mut obs, *t);
        for series in &traj.observations {
            obs.push(',');
            fmt_num(&mut obs, series[k]);
        }
        obs.push('\n');
    }
    fs::write(dir.join("observers.csv"), obs)?;

    let summary = serde_json::json!({
        "config": cfg,
        "integration": cfg.integration_options(),
        "constructed": run.built.constructed,
        "summary": run.summary,
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(dir)
}

fn explicit(rows: [[f64; 3]; 3]) -> MatrixSource {
    MatrixSource::Explicit {
        matrix: DMatrix::from_fn(3, 3, |i, j| rows[i][j]),
    }
}

fn cos_sin_cos(fast: f64, slow: f64) -> ModulationSpec {
    let entry = |freq, trig| Sinusoid {
        amplitude: 2.0,
        freq,
        phase: 0.0,
        trig,
    };
    ModulationSpec::Sinusoids {
        entries: vec![
            entry(fast, Trig::Cos),
            entry(fast, Trig::Sin),
            entry(slow, Trig::Cos),
        ],
    }
}

/// Symmetric positive-definite query-key matrix of the gradient-flow scenario.
pub const GRADIENT_P: [[f64; 3]; 3] = [
    [0.9432, 0.0587, -0.1813],
    [0.0587, 0.8450, -0.1013],
    [-0.1813, -0.1013, 0.5519],
];
/// Constant factors of the two hemisphere-scenario heads.
pub const HEMISPHERE_P1: [[f64; 3]; 3] = [
    [0.0805, -0.1929, 0.1991],
    [-0.2312, 0.3131, -0.2335],
    [0.1788, -0.1732, -0.1594],
];
pub const HEMISPHERE_P2: [[f64; 3]; 3] = [
    [-0.3067, 0.0349, 0.1107],
    [0.0572, -0.0557, 0.1343],
    [0.1375, 0.1083, 0.1018],
];
/// Constant query-key factor and symmetric value matrix of the causal symmetric-U scenario.
pub const SYMMETRIC_U_P: [[f64; 3]; 3] = [
    [0.3598, 0.4150, 0.1319],
    [0.0971, -0.0668, -0.2046],
    [0.1548, -0.2102, 0.1220],
];
pub const SYMMETRIC_U: [[f64; 3]; 3] = [
    [-0.2590, 0.4965, 0.5609],
    [0.4965, -0.7174, -0.5003],
    [0.5609, -0.5003, -0.0247],
];

fn base_config(name: &str, heads: Vec<HeadSpec>) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        seed: 0,
        ell: 10,
        dim: 3,
        mask: Mask::Full,
        normalization: Normalization::Scaled,
        projection: ProjectionKind::Standard,
        t_final: default_t_final(),
        dt: default_dt(),
        store_every: 1,
        convergence_tol: CONVERGENCE_TOL,
        norm_bound: None,
        metric: MetricSpec::Identity,
        init: InitSpec::default(),
        observers: default_observers(),
        heads,
    }
}

fn hemisphere_heads() -> Vec<HeadSpec> {
    vec![
        HeadSpec {
            query_key: explicit(HEMISPHERE_P1),
            modulation: Some(cos_sin_cos(10.0, 6.0)),
            value: MatrixSource::Identity,
        },
        HeadSpec {
            query_key: explicit(HEMISPHERE_P2),
            modulation: Some(cos_sin_cos(6.0, 4.0)),
            value: MatrixSource::Identity,
        },
    ]
}

/// The built-in scenario library.
pub fn builtin_scenarios() -> Vec<ScenarioConfig> {
    let x_axis = ReferenceSpec::Vector {
        vector: vec![1.0, 0.0, 0.0],
    };

    let mut grad = base_config(
        "theorem-grad",
        vec![HeadSpec {
            query_key: explicit(GRADIENT_P),
            modulation: None,
            value: MatrixSource::Identity,
        }],
    );
    grad.metric = MetricSpec::FromP { head: 0 };
    grad.observers = vec![
        ObserverSpec::ConsensusE,
        ObserverSpec::Spread,
        ObserverSpec::Potential { head: 0 },
        ObserverSpec::VelocityNorm,
    ];

    let mut hemi = base_config("theorem-hemisphere", hemisphere_heads());
    hemi.norm_bound = Some(1.2);
    hemi.init = InitSpec::BoxProjected {
        half_width: DEFAULT_HALF_WIDTH,
        hemisphere: Some(x_axis.clone()),
    };
    hemi.observers = vec![
        ObserverSpec::ConsensusE,
        ObserverSpec::Spread,
        ObserverSpec::Hemisphere {
            reference: x_axis.clone(),
        },
        ObserverSpec::Alignments { reference: x_axis },
        ObserverSpec::ScheduleFrobenius,
    ];

    let mut sym = base_config(
        "theorem-symmetric-U",
        vec![HeadSpec {
            query_key: explicit(SYMMETRIC_U_P),
            modulation: Some(cos_sin_cos(10.0, 6.0)),
            value: explicit(SYMMETRIC_U),
        }],
    );
    sym.mask = Mask::Causal;
    sym.norm_bound = Some(1.2);
    sym.t_final = 60.0;
    sym.store_every = 10;
    sym.init = InitSpec::BoxProjected {
        half_width: DEFAULT_HALF_WIDTH,
        hemisphere: Some(ReferenceSpec::UTop { negate: false }),
    };
    sym.observers = vec![
        ObserverSpec::ConsensusE,
        ObserverSpec::Spread,
        ObserverSpec::Alignments {
            reference: ReferenceSpec::UTop { negate: false },
        },
    ];

    let random_head = || HeadSpec {
        query_key: MatrixSource::Random {
            spec: RandomMatrixSpec::UniformBox {
                half_width: DEFAULT_HALF_WIDTH,
            },
        },
        modulation: Some(ModulationSpec::RandomAbsSin { amplitude: 2.0 }),
        value: MatrixSource::Identity,
    };
    let mut high = base_config("highdim-causal", vec![random_head(), random_head()]);
    high.ell = 20;
    high.dim = 64;
    high.mask = Mask::Causal;
    high.dt = 5e-3;
    high.t_final = 50.0;
    high.store_every = 40;
    high.observers = vec![
        ObserverSpec::ConsensusE,
        ObserverSpec::Spread,
        ObserverSpec::Alignments {
            reference: ReferenceSpec::FirstToken,
        },
    ];

    let mut causal = base_config("causal-identity", hemisphere_heads());
    causal.mask = Mask::Causal;
    causal.norm_bound = Some(1.2);
    causal.t_final = 40.0;
    causal.store_every = 10;
    causal.observers = vec![
        ObserverSpec::ConsensusE,
        ObserverSpec::Spread,
        ObserverSpec::Alignments {
            reference: ReferenceSpec::FirstToken,
        },
    ];

    let mut special = base_config(
        "special-projection-equivalence",
        vec![HeadSpec {
            query_key: explicit(HEMISPHERE_P1),
            modulation: Some(cos_sin_cos(10.0, 6.0)),
            value: MatrixSource::Random {
                spec: RandomMatrixSpec::Invertible {
                    half_width: DEFAULT_HALF_WIDTH,
                    max_condition: 50.0,
                },
            },
        }],
    );
    special.mask = Mask::Causal;
    special.projection = ProjectionKind::SpecialU;
    special.metric = MetricSpec::FromUtu { head: 0 };
    special.t_final = 40.0;
    special.observers = vec![ObserverSpec::ConsensusE, ObserverSpec::Spread];

    vec![grad, hemi, sym, high, causal, special]
}

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    builtin_scenarios().into_iter().find(|c| c.name == name)
}

/// Frobenius and spectral norms of every head's query-key matrix at `t`.
pub fn schedule_norms(spec: &FlowSpec, t: f64) -> Vec<(f64, f64)> {
    spec.schedule()
        .evaluate(t)
        .iter()
        .map(|h| (h.query_key.norm(), operator_norm(&h.query_key)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid_and_unique() {
        let all = builtin_scenarios();
        assert!(all.len() >= 6);
        let mut names: Vec<_> = all.iter().map(|c| c.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
        for cfg in &all {
            build_scenario(cfg).unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
        }
    }

    #[test]
    fn build_is_deterministic() {
        for cfg in builtin_scenarios() {
            let a = build_scenario(&cfg).unwrap();
            let b = build_scenario(&cfg).unwrap();
            assert_eq!(a.constructed, b.constructed);
            assert_eq!(a.initial, b.initial);
        }
        let mut cfg = builtin("highdim-causal").unwrap();
        let a = build_scenario(&cfg).unwrap();
        cfg.seed = 1;
        let b = build_scenario(&cfg).unwrap();
        assert_ne!(a.initial, b.initial);
    }

    #[test]
    fn from_p_places_tokens_on_the_ellipsoid() {
        let built = build_scenario(&builtin("theorem-grad").unwrap()).unwrap();
        assert!(built.spec.metric().max_drift(built.initial.points()) <= 1e-12);
        assert!(!built.spec.metric().is_identity());
    }

    #[test]
    fn hemisphere_and_eigenvector_sampling() {
        let built = build_scenario(&builtin("theorem-hemisphere").unwrap()).unwrap();
        assert!(built.initial.points().row(0).iter().all(|&x| x > 0.0));
        assert!(built.warnings.is_empty(), "{:?}", built.warnings);
        let built = build_scenario(&builtin("theorem-symmetric-U").unwrap()).unwrap();
        let v = DVector::from_vec(built.constructed.hemisphere_reference.clone().unwrap());
        assert!(v[0] > 0.0);
        assert!(built.initial.points().column_iter().all(|c| v.dot(&c) > 0.0));
    }

    #[test]
    fn singular_utu_metric_is_rejected() {
        let mut cfg = builtin("special-projection-equivalence").unwrap();
        cfg.heads[0].value = MatrixSource::Explicit {
            matrix: DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]),
        };
        assert!(matches!(build_scenario(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        for cfg in builtin_scenarios() {
            let text = cfg.to_toml_string().unwrap();
            let back = ScenarioConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            let a = build_scenario(&cfg).unwrap();
            let b = build_scenario(&back).unwrap();
            assert_eq!(a.constructed, b.constructed);
        }
    }

    #[test]
    fn malformed_config_reports_a_line() {
        let text = "name = \"x\"\nseed = 1\nell = 3\ndim = oops\n";
        match ScenarioConfig::from_toml_str(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("line 4"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_fields_are_config_errors() {
        let base = builtin("theorem-grad").unwrap();
        let cases: Vec<Box<dyn Fn(&mut ScenarioConfig)>> = vec![
            Box::new(|c| c.dt = -1.0),
            Box::new(|c| c.ell = 0),
            Box::new(|c| c.heads.clear()),
            Box::new(|c| c.metric = MetricSpec::FromP { head: 3 }),
            Box::new(|c| c.name = "a/b".into()),
            Box::new(|c| c.init = InitSpec::Explicit { points: vec![vec![1.0, 0.0, 0.0]] }),
        ];
        for f in cases {
            let mut cfg = base.clone();
            f(&mut cfg);
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn random_matrix_protocols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = RandomMatrixSpec::UniformBox { half_width: 0.5 }.sample(&mut rng, 4).unwrap();
            assert!(a.amax() <= 0.5);
            let s = RandomMatrixSpec::Symmetrized { half_width: 0.5 }.sample(&mut rng, 4).unwrap();
            assert_eq!(s, s.transpose());
            let p = RandomMatrixSpec::SymmetricPositiveDefinite { half_width: 0.5, margin: 0.1 }
                .sample(&mut rng, 4)
                .unwrap();
            assert!(p.clone().symmetric_eigenvalues().min() >= 0.1 - 1e-12);
            let u = RandomMatrixSpec::Invertible { half_width: 0.5, max_condition: 50.0 }
                .sample(&mut rng, 3)
                .unwrap();
            let sv = u.svd(false, false).singular_values;
            assert!(sv.max() / sv.min() < 50.0);
        }
    }

    #[test]
    fn random_abs_sin_modulation_is_recorded() {
        let built = build_scenario(&builtin("highdim-causal").unwrap()).unwrap();
        for head in &built.constructed.heads {
            match &head.query_key {
                MatrixSchedule::DiagonalModulated { diagonal, .. } => {
                    assert_eq!(diagonal.len(), 64);
                    for s in diagonal {
                        assert!(s.freq > 0.0 && s.freq * PI < 1.0);
                        assert!((0.0..2.0 * PI).contains(&s.phase));
                        assert_eq!(s.trig, Trig::AbsSin);
                    }
                }
                other => panic!("unexpected schedule {other:?}"),
            }
        }
    }
}
