//! Geometry of the ellipsoid `E_W = { x : xᵀ W x = 1 }` for a symmetric
//! positive-definite `W`.
//!
//! Tokens are stored column-wise: a configuration of `ℓ` tokens of dimension
//! `n + 1` is an `(n + 1) × ℓ` matrix. Only the projection calculus needed by
//! the attention dynamics lives here: norms, the radial projection onto the
//! ellipsoid, its tangent map, hemisphere tests and random initialisation.

use nalgebra::{DMatrix, DVector, Dyn, Matrix, Storage, U1};
use rand::Rng;

use crate::error::{Error, Result};

/// Default tolerance for `|yᵀ W y − 1|` membership checks.
pub const MANIFOLD_TOL: f64 = 1e-9;

/// Draws whose W-norm falls below this are resampled.
const MIN_SAMPLE_NORM: f64 = 1e-8;

type ColumnVector<S> = Matrix<f64, Dyn, U1, S>;

/// Symmetric positive-definite matrix defining the ellipsoid and its inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    matrix: DMatrix<f64>,
    identity: bool,
}

impl MetricMatrix {
    /// Validates symmetry (relative 1e-12) and positive definiteness (Cholesky).
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Contract(format!(
                "metric must be a non-empty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("metric has non-finite entries".into()));
        }
        let scale = matrix.amax();
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Contract(format!(
                "metric is not symmetric (max |W_ij - W_ji| = {asym:e})"
            )));
        }
        if matrix.clone().cholesky().is_none() {
            return Err(Error::Contract("metric is not positive definite".into()));
        }
        let identity = matrix == DMatrix::identity(matrix.nrows(), matrix.ncols());
        Ok(Self { matrix, identity })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            identity: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// `aᵀ W b`.
    pub fn inner<S1, S2>(&self, a: &ColumnVector<S1>, b: &ColumnVector<S2>) -> f64
    where
        S1: Storage<f64, Dyn>,
        S2: Storage<f64, Dyn>,
    {
        if self.identity {
            a.dot(b)
        } else {
            a.dot(&(&self.matrix * b))
        }
    }

    /// `W x` (a copy of `x` on the sphere).
    pub fn apply<S: Storage<f64, Dyn>>(&self, x: &ColumnVector<S>) -> DVector<f64> {
        if self.identity {
            x.clone_owned()
        } else {
            &self.matrix * x
        }
    }

    /// `|x|_W = (xᵀ W x)^{1/2}`; the origin is outside the domain.
    pub fn w_norm<S: Storage<f64, Dyn>>(&self, x: &ColumnVector<S>) -> Result<f64> {
        self.check_len(x.len())?;
        let sq = self.inner(x, x);
        if !sq.is_finite() {
            return Err(Error::Numeric("non-finite W-norm".into()));
        }
        if sq <= 0.0 {
            return Err(Error::Domain("W-norm of the zero vector".into()));
        }
        Ok(sq.sqrt())
    }

    /// Radial projection `x ↦ x / |x|_W` onto the ellipsoid.
    pub fn project<S: Storage<f64, Dyn>>(&self, x: &ColumnVector<S>) -> Result<DVector<f64>> {
        let norm = self.w_norm(x)?;
        Ok(x / norm)
    }

    /// Tangent map of the projection at a point `y` of the ellipsoid:
    /// `X ↦ (I − y yᵀ W) X`.
    pub fn tangent_project<S1, S2>(&self, y: &ColumnVector<S1>, x: &ColumnVector<S2>) -> DVector<f64>
    where
        S1: Storage<f64, Dyn>,
        S2: Storage<f64, Dyn>,
    {
        let radial = self.inner(y, x);
        x - y * radial
    }

    /// Maximum of `|y_iᵀ W y_i − 1|` over the columns of `points`.
    pub fn max_drift(&self, points: &DMatrix<f64>) -> f64 {
        points
            .column_iter()
            .map(|c| (self.inner(&c, &c) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Contract(format!(
                "vector of length {len} against a metric of dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `ℓ` tokens on `E_W`, stored as the columns of an `(n + 1) × ℓ` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConfiguration {
    points: DMatrix<f64>,
}

impl TokenConfiguration {
    /// Checks every column against `metric` at [`MANIFOLD_TOL`].
    pub fn new(points: DMatrix<f64>, metric: &MetricMatrix) -> Result<Self> {
        Self::with_tolerance(points, metric, MANIFOLD_TOL)
    }

    pub fn with_tolerance(points: DMatrix<f64>, metric: &MetricMatrix, tol: f64) -> Result<Self> {
        if points.nrows() != metric.dim() {
            return Err(Error::Contract(format!(
                "tokens have dimension {} but the metric has dimension {}",
                points.nrows(),
                metric.dim()
            )));
        }
        if points.ncols() == 0 {
            return Err(Error::Contract("a configuration needs at least one token".into()));
        }
        for (i, c) in points.column_iter().enumerate() {
            let q = metric.inner(&c, &c);
            if !q.is_finite() {
                return Err(Error::Numeric(format!("token {i} is not finite")));
            }
            if (q - 1.0).abs() > tol {
                return Err(Error::Domain(format!(
                    "token {i} is off the ellipsoid: |yᵀWy - 1| = {:e}",
                    (q - 1.0).abs()
                )));
            }
        }
        Ok(Self { points })
    }

    /// Projects every column of `points` onto `E_W`.
    pub fn from_ambient(points: DMatrix<f64>, metric: &MetricMatrix) -> Result<Self> {
        let mut out = points;
        project_columns(&mut out, metric)?;
        Self::new(out, metric)
    }

    pub(crate) fn from_trusted(points: DMatrix<f64>) -> Self {
        Self { points }
    }

    pub fn ell(&self) -> usize {
        self.points.ncols()
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn token(&self, i: usize) -> DVector<f64> {
        self.points.column(i).clone_owned()
    }

    /// The first `count` tokens.
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            points: self.points.columns(0, count).clone_owned(),
        }
    }

    pub fn into_points(self) -> DMatrix<f64> {
        self.points
    }
}

/// Per-token velocities; same shape as the configuration they are attached to.
pub type TokenVelocities = DMatrix<f64>;

/// Projects every column in place; fails on a zero column.
pub fn project_columns(points: &mut DMatrix<f64>, metric: &MetricMatrix) -> Result<()> {
    for mut c in points.column_iter_mut() {
        let norm = metric.w_norm(&c)?;
        c /= norm;
    }
    Ok(())
}

/// `(I − y_i y_iᵀ W) X_i` applied column by column.
pub fn tangent_project_columns(
    points: &DMatrix<f64>,
    ambient: &DMatrix<f64>,
    metric: &MetricMatrix,
) -> TokenVelocities {
    let mut out = ambient.clone();
    for (i, mut c) in out.column_iter_mut().enumerate() {
        let y = points.column(i);
        let radial = metric.inner(&y, &c);
        c.axpy(-radial, &y, 1.0);
    }
    out
}

/// Open hemisphere test `vᵀ y > 0` (Euclidean pairing, strict).
pub fn hemisphere_contains<S1, S2>(v: &ColumnVector<S1>, y: &ColumnVector<S2>) -> bool
where
    S1: Storage<f64, Dyn>,
    S2: Storage<f64, Dyn>,
{
    v.dot(y) > 0.0
}

/// Draws `ell` tokens i.i.d. uniform on `[-half_width, half_width]^dim` and
/// projects them onto `E_W`. Near-zero draws are redrawn.
pub fn sample_box_projected<R: Rng + ?Sized>(
    rng: &mut R,
    ell: usize,
    metric: &MetricMatrix,
    half_width: f64,
) -> Result<TokenConfiguration> {
    sample_box_projected_where(rng, ell, metric, half_width, |_| true)
}

/// Like [`sample_box_projected`], redrawing each token until `accept` holds
/// for its projected value.
pub fn sample_box_projected_where<R, F>(
    rng: &mut R,
    ell: usize,
    metric: &MetricMatrix,
    half_width: f64,
    accept: F,
) -> Result<TokenConfiguration>
where
    R: Rng + ?Sized,
    F: Fn(&DVector<f64>) -> bool,
{
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::Contract(format!(
            "half_width must be positive, got {half_width}"
        )));
    }
    if ell == 0 {
        return Err(Error::Contract("cannot sample zero tokens".into()));
    }
    let dim = metric.dim();
    let mut points = DMatrix::zeros(dim, ell);
    for i in 0..ell {
        let mut attempts = 0usize;
        let token = loop {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Domain(
                    "rejection sampling did not find an acceptable token".into(),
                ));
            }
            let x = DVector::from_fn(dim, |_, _| rng.random_range(-half_width..half_width));
            if metric.inner(&x, &x).sqrt() < MIN_SAMPLE_NORM {
                continue;
            }
            let y = metric.project(&x)?;
            if accept(&y) {
                break y;
            }
        };
        points.set_column(i, &token);
    }
    Ok(TokenConfiguration::from_trusted(points))
}
