//! Head parameter schedules and attention coefficients.
//!
//! For a head with query-key product `P` the coefficient between tokens
//! `i` and `j` is
//!
//! ```text
//! α_ij = exp(y_iᵀ P y_j) / Z_i,    Z_i = √(n+1) · Σ_{k ∈ supp(i)} exp(y_iᵀ P y_k)
//! ```
//!
//! where `supp(i)` is every token for full attention and `1..=i` for causal
//! attention. Rows therefore sum to `1/√(n+1)` rather than one; the
//! [`Normalization::Softmax`] option drops that factor for comparison runs.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points used to check a declared norm bound.
pub const NORM_BOUND_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mask {
    #[default]
    Full,
    Causal,
}

impl Mask {
    /// Number of tokens attended to by token `i` (0-based) out of `ell`.
    pub fn support(self, i: usize, ell: usize) -> usize {
        match self {
            Mask::Full => ell,
            Mask::Causal => i + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Rows sum to `1/√(n+1)`.
    #[default]
    Scaled,
    /// Plain softmax, rows sum to one.
    Softmax,
}

impl Normalization {
    pub fn row_scale(self, dim: usize) -> f64 {
        match self {
            Normalization::Scaled => (dim as f64).sqrt(),
            Normalization::Softmax => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trig {
    Cos,
    Sin,
    AbsSin,
}

/// `amplitude · trig(freq · π · t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
    pub trig: Trig,
}

impl Sinusoid {
    pub fn eval(&self, t: f64) -> f64 {
        let arg = self.freq * PI * t + self.phase;
        self.amplitude
            * match self.trig {
                Trig::Cos => arg.cos(),
                Trig::Sin => arg.sin(),
                Trig::AbsSin => arg.sin().abs(),
            }
    }

    pub fn max_abs(&self) -> f64 {
        self.amplitude.abs()
    }
}

/// A time-dependent square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MatrixSchedule {
    Constant {
        #[serde(with = "crate::rows")]
        matrix: DMatrix<f64>,
    },
    /// `D(t) · base` with `D(t) = diag(diagonal[k](t))`.
    DiagonalModulated {
        diagonal: Vec<Sinusoid>,
        #[serde(with = "crate::rows")]
        base: DMatrix<f64>,
    },
    /// Left-continuous lookup: at `t` the entry with the largest breakpoint
    /// strictly below `t` applies; before the second breakpoint the first does.
    PiecewiseConstant { table: Vec<Breakpoint> },
    /// `left · inner(t) · right`.
    Congruence {
        #[serde(with = "crate::rows")]
        left: DMatrix<f64>,
        inner: Box<MatrixSchedule>,
        #[serde(with = "crate::rows")]
        right: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub t: f64,
    #[serde(with = "crate::rows")]
    pub matrix: DMatrix<f64>,
}

impl MatrixSchedule {
    pub fn constant(matrix: DMatrix<f64>) -> Self {
        MatrixSchedule::Constant { matrix }
    }

    pub fn identity(dim: usize) -> Self {
        MatrixSchedule::Constant {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixSchedule::Constant { matrix } => matrix.clone(),
            MatrixSchedule::DiagonalModulated { diagonal, base } => {
                let mut out = base.clone();
                for (k, mut row) in out.row_iter_mut().enumerate() {
                    row *= diagonal[k].eval(t);
                }
                out
            }
            MatrixSchedule::PiecewiseConstant { table } => {
                let idx = table.iter().rposition(|b| b.t < t).unwrap_or(0);
                table[idx].matrix.clone()
            }
            MatrixSchedule::Congruence { left, inner, right } => left * inner.eval(t) * right,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MatrixSchedule::Constant { matrix } => matrix.nrows(),
            MatrixSchedule::DiagonalModulated { base, .. } => base.nrows(),
            MatrixSchedule::PiecewiseConstant { table } => table[0].matrix.nrows(),
            MatrixSchedule::Congruence { left, .. } => left.nrows(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            MatrixSchedule::Constant { .. } => true,
            MatrixSchedule::DiagonalModulated { .. } => false,
            MatrixSchedule::PiecewiseConstant { table } => table.len() == 1,
            MatrixSchedule::Congruence { inner, .. } => inner.is_constant(),
        }
    }

    /// Checks shapes and finiteness against the token dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let square = |m: &DMatrix<f64>, what: &str| -> Result<()> {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Config(format!(
                    "{what} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        match self {
            MatrixSchedule::Constant { matrix } => square(matrix, "constant matrix"),
            MatrixSchedule::DiagonalModulated { diagonal, base } => {
                square(base, "modulated base matrix")?;
                if diagonal.len() != dim {
                    return Err(Error::Config(format!(
                        "modulation has {} diagonal entries, expected {dim}",
                        diagonal.len()
                    )));
                }
                Ok(())
            }
            MatrixSchedule::PiecewiseConstant { table } => {
                if table.is_empty() {
                    return Err(Error::Config("piecewise schedule has no breakpoints".into()));
                }
                if table.windows(2).any(|w| w[1].t <= w[0].t) {
                    return Err(Error::Config(
                        "piecewise breakpoints must be strictly increasing".into(),
                    ));
                }
                table
                    .iter()
                    .try_for_each(|b| square(&b.matrix, "piecewise matrix"))
            }
            MatrixSchedule::Congruence { left, inner, right } => {
                square(left, "congruence left factor")?;
                square(right, "congruence right factor")?;
                inner.validate(dim)
            }
        }
    }
}

/// Query-key product and value matrix of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSchedule {
    pub query_key: MatrixSchedule,
    pub value: MatrixSchedule,
}

/// `P_η(t)` and `U_η(t)` evaluated at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrices {
    pub query_key: DMatrix<f64>,
    pub value: DMatrix<f64>,
}

/// Per-head parameter schedules plus a declared bound on `‖P_η(t)‖₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParameterSchedule {
    pub heads: Vec<HeadSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
}

/// Largest sampled violation of a declared norm bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBoundViolation {
    pub head: usize,
    pub t: f64,
    pub norm: f64,
    pub bound: f64,
}

impl HeadParameterSchedule {
    pub fn single(query_key: MatrixSchedule, value: MatrixSchedule) -> Self {
        Self {
            heads: vec![HeadSchedule { query_key, value }],
            norm_bound: None,
        }
    }

    pub fn with_norm_bound(mut self, b: f64) -> Self {
        self.norm_bound = Some(b);
        self
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn evaluate(&self, t: f64) -> Vec<HeadMatrices> {
        self.heads
            .iter()
            .map(|h| HeadMatrices {
                query_key: h.query_key.eval(t),
                value: h.value.eval(t),
            })
            .collect()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        for h in &self.heads {
            h.query_key.validate(dim)?;
            h.value.validate(dim)?;
        }
        if let Some(b) = self.norm_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("norm bound must be >= 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Samples `‖P_η(t)‖₂` on a uniform grid over `[0, t_final]` and returns
    /// the worst violation of the declared bound, logging it as a warning.
    pub fn check_norm_bound(&self, t_final: f64, samples: usize) -> Option<NormBoundViolation> {
        let bound = self.norm_bound?;
        let samples = samples.max(2);
        let mut worst: Option<NormBoundViolation> = None;
        for (head, h) in self.heads.iter().enumerate() {
            let grid: Vec<f64> = if h.query_key.is_constant() {
                vec![0.0]
            } else {
                (0..samples)
                    .map(|k| t_final * k as f64 / (samples - 1) as f64)
                    .collect()
            };
            for t in grid {
                let norm = operator_norm(&h.query_key.eval(t));
                if norm > bound && worst.is_none_or(|w| norm > w.norm) {
                    worst = Some(NormBoundViolation { head, t, norm, bound });
                }
            }
        }
        if let Some(w) = worst {
            log::warn!(
                "head {} violates the declared norm bound: ‖P(t={})‖ = {} > {}",
                w.head,
                w.t,
                w.norm,
                w.bound
            );
        }
        worst
    }
}

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Attention coefficients for one head. `tokens` holds one token per column.
///
/// Exponents are shifted by the row maximum before exponentiation.
pub fn attention_matrix(
    query_key: &DMatrix<f64>,
    tokens: &DMatrix<f64>,
    mask: Mask,
    normalization: Normalization,
) -> Result<DMatrix<f64>> {
    let dim = tokens.nrows();
    if query_key.nrows() != dim || query_key.ncols() != dim {
        return Err(Error::Contract(format!(
            "query-key matrix is {}x{} for tokens of dimension {dim}",
            query_key.nrows(),
            query_key.ncols()
        )));
    }
    let logits = tokens.transpose() * (query_key * tokens);
    softmax_rows(&logits, mask, normalization.row_scale(dim))
}

/// Row-wise normalised exponentials of `logits` over the mask support,
/// divided by `scale`.
pub(crate) fn softmax_rows(logits: &DMatrix<f64>, mask: Mask, scale: f64) -> Result<DMatrix<f64>> {
    let ell = logits.nrows();
    let mut alpha = DMatrix::zeros(ell, ell);
    for i in 0..ell {
        let support = mask.support(i, ell);
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..support {
            let v = row[j];
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite attention logit at ({i}, {j})")));
            }
            max = max.max(v);
        }
        let mut sum = 0.0;
        for j in 0..support {
            let e = (row[j] - max).exp();
            alpha[(i, j)] = e;
            sum += e;
        }
        let denom = scale * sum;
        for j in 0..support {
            alpha[(i, j)] /= denom;
        }
    }
    Ok(alpha)
}

/// Per-head attention matrices at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: Vec<DMatrix<f64>>,
    pub mask: Mask,
}

impl AttentionWeights {
    pub fn compute(
        schedule: &HeadParameterSchedule,
        t: f64,
        tokens: &DMatrix<f64>,
        mask: Mask,
        normalization: Normalization,
    ) -> Result<Self> {
        let heads = schedule
            .evaluate(t)
            .iter()
            .map(|h| attention_matrix(&h.query_key, tokens, mask, normalization))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads, mask })
    }
}

/// Uniform bounds `c1 ≤ α_ij ≤ c2` valid whenever `‖P‖ ≤ b` and every token
/// has Euclidean norm at most `k`:
/// `c1 = 1 / (√(n+1) · ℓ · e^{2k²b})`, `c2 = e^{2k²b}`.
pub fn alpha_bounds(b: f64, ell: usize, n: usize, k: f64) -> Result<(f64, f64)> {
    if !(b >= 0.0) || !(k > 0.0) || ell == 0 {
        return Err(Error::Contract(format!(
            "alpha_bounds needs b >= 0, K > 0, ell >= 1 (got b={b}, K={k}, ell={ell})"
        )));
    }
    let growth = (2.0 * k * k * b).exp();
    let c1 = 1.0 / (((n + 1) as f64).sqrt() * ell as f64 * growth);
    Ok((c1, growth))
}
