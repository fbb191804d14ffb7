//! Linear-Gaussian inverse problems and nested sampling conditioned on them.

use nalgebra::{QR, SVD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{GmmPrior, MeasurementDenoiser};
use crate::error::{param, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::nested::{self, NestedPlan};
use crate::sampler::Trace;
use crate::schedule::NoiseSchedule;

/// Singular values below this are treated as exact zeros.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// Keep the listed coordinates (inpainting analog).
    Mask {
        keep: Vec<usize>,
    },
    /// Average consecutive blocks of `factor` coordinates (super-resolution analog).
    AveragePool {
        factor: usize,
    },
    Identity,
    Custom,
}

/// Cached decomposition `H = U diag(s) V_r^T`, with `basis = [V_r | V_perp]`
/// a full orthonormal basis of the input space.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSvd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub basis: Matrix,
}

impl OperatorSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    fn compute(h: &Matrix) -> Self {
        let (m, dim) = h.shape();
        if m == 0 || h.amax() == 0.0 {
            return Self { u: Matrix::zeros(m, 0), singular_values: vec![], basis: Matrix::identity(dim, dim) };
        }
        let svd = SVD::new(h.clone(), true, true);
        let u_all = svd.u.expect("requested U");
        let vt_all = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> =
            (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > RANK_TOL).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let rank = order.len();
        let u = Matrix::from_fn(m, rank, |i, j| u_all[(i, order[j])]);
        let v_r = Matrix::from_fn(dim, rank, |i, j| vt_all[(order[j], i)]);
        let singular_values = order.iter().map(|&i| svd.singular_values[i]).collect();

        // Complete V_r to an orthonormal basis: QR of [V_r | I] spans V_r first.
        let mut stacked = Matrix::zeros(dim, rank + dim);
        stacked.view_mut((0, 0), (dim, rank)).copy_from(&v_r);
        stacked.view_mut((0, rank), (dim, dim)).copy_from(&Matrix::identity(dim, dim));
        let q = QR::new(stacked).q();
        let mut basis = Matrix::zeros(dim, dim);
        basis.view_mut((0, 0), (dim, rank)).copy_from(&v_r);
        if rank < dim {
            basis.view_mut((0, rank), (dim, dim - rank)).copy_from(&q.view((0, rank), (dim, dim - rank)));
        }
        Self { u, singular_values, basis }
    }

    fn reconstruct(&self) -> Matrix {
        let r = self.rank();
        let v_r = self.basis.columns(0, r);
        &self.u * Matrix::from_diagonal(&Vector::from_vec(self.singular_values.clone())) * v_r.transpose()
    }
}

/// Degradation operator `H` with its decomposition computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    matrix: Matrix,
    kind: OperatorKind,
    svd: OperatorSvd,
}

impl LinearOperator {
    fn build(matrix: Matrix, kind: OperatorKind) -> Result<Self> {
        if matrix.ncols() == 0 {
            return Err(param("operator must act on a positive dimension"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(param("operator has non-finite entries"));
        }
        let svd = OperatorSvd::compute(&matrix);
        debug_assert!((svd.reconstruct() - &matrix).amax() < 1e-10);
        Ok(Self { matrix, kind, svd })
    }

    pub fn identity(dim: usize) -> Self {
        Self::build(Matrix::identity(dim, dim), OperatorKind::Identity).expect("identity is valid")
    }

    pub fn mask(dim: usize, keep: &[usize]) -> Result<Self> {
        if keep.iter().any(|&k| k >= dim) {
            return Err(param(format!("mask index out of range for dimension {dim}")));
        }
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != keep.len() {
            return Err(param("mask indices must be distinct"));
        }
        let matrix = Matrix::from_fn(keep.len(), dim, |i, j| if keep[i] == j { 1.0 } else { 0.0 });
        Self::build(matrix, OperatorKind::Mask { keep: keep.to_vec() })
    }

    pub fn average_pool(dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !dim.is_multiple_of(factor) {
            return Err(param(format!("pool factor {factor} must divide dimension {dim}")));
        }
        let rows = dim / factor;
        let matrix = Matrix::from_fn(rows, dim, |i, j| if j / factor == i { 1.0 / factor as f64 } else { 0.0 });
        Self::build(matrix, OperatorKind::AveragePool { factor })
    }

    pub fn custom(matrix: Matrix) -> Result<Self> {
        Self::build(matrix, OperatorKind::Custom)
    }

    /// Parses a custom matrix from comma-delimited rows. `dim` is only needed
    /// when the text has no rows at all.
    pub fn from_delimited(text: &str, dim: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| param(format!("bad matrix entry {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let cols = rows.first().map(|r| r.len()).or(dim).ok_or_else(|| param("empty operator needs a dimension"))?;
        if rows.iter().any(|r| r.len() != cols) {
            return Err(param("operator rows have different lengths"));
        }
        Self::custom(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rank(&self) -> usize {
        self.svd.rank()
    }

    pub fn svd(&self) -> &OperatorSvd {
        &self.svd
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x
    }

    /// True when each row picks out a single input coordinate with weight one.
    pub fn is_coordinate_selection(&self) -> bool {
        matches!(self.kind, OperatorKind::Mask { .. } | OperatorKind::Identity)
    }

    /// Input coordinate observed by each row, for selection operators.
    pub fn selected_coordinates(&self) -> Vec<usize> {
        match &self.kind {
            OperatorKind::Mask { keep } => keep.clone(),
            OperatorKind::Identity => (0..self.cols()).collect(),
            _ => vec![],
        }
    }
}

/// Config form of an operator: kind plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Mask {
        keep: Vec<usize>,
    },
    AveragePool {
        factor: usize,
    },
    Identity,
    /// Delimited-text matrix file.
    Custom {
        file: std::path::PathBuf,
    },
    /// No measurement at all.
    Empty,
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<LinearOperator> {
        match self {
            OperatorSpec::Mask { keep } => LinearOperator::mask(dim, keep),
            OperatorSpec::AveragePool { factor } => LinearOperator::average_pool(dim, *factor),
            OperatorSpec::Identity => Ok(LinearOperator::identity(dim)),
            OperatorSpec::Custom { file } => {
                let text = std::fs::read_to_string(file)?;
                let op = LinearOperator::from_delimited(&text, Some(dim))?;
                if op.cols() != dim {
                    return Err(param(format!("custom operator has {} columns, data has {dim}", op.cols())));
                }
                Ok(op)
            }
            OperatorSpec::Empty => LinearOperator::custom(Matrix::zeros(0, dim)),
        }
    }
}

/// Measurement `y = H x0 + sigma_y z` together with its operator.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseProblem {
    pub operator: LinearOperator,
    pub y: Vector,
    pub sigma_y: f64,
}

impl InverseProblem {
    pub fn new(operator: LinearOperator, y: Vector, sigma_y: f64) -> Result<Self> {
        if y.len() != operator.rows() {
            return Err(param(format!("measurement has {} entries, operator has {} rows", y.len(), operator.rows())));
        }
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return Err(param(format!("sigma_y must be finite and >= 0, got {sigma_y}")));
        }
        linalg::ensure_finite(&y, "measurement")?;
        Ok(Self { operator, y, sigma_y })
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.operator.cols() != dim {
            return Err(param(format!("operator acts on dimension {}, data has {dim}", self.operator.cols())));
        }
        Ok(())
    }

    /// Largest deviation of `H x` from `y`.
    pub fn residual(&self, x: &Vector) -> f64 {
        (self.operator.apply(x) - &self.y).amax()
    }
}

/// `y = H x0 + sigma_y z`. No noise is drawn when `sigma_y` is zero.
pub fn degrade<R: Rng + ?Sized>(operator: &LinearOperator, sigma_y: f64, x0: &Vector, rng: &mut R) -> Result<Vector> {
    if x0.len() != operator.cols() {
        return Err(param(format!("x0 has dimension {}, operator expects {}", x0.len(), operator.cols())));
    }
    let clean = operator.apply(x0);
    if sigma_y == 0.0 {
        return Ok(clean);
    }
    Ok(clean + linalg::standard_normal(operator.rows(), rng) * sigma_y)
}

/// Nested sampling with every inner denoiser call conditioned on the measurement.
pub fn nested_inverse_sample<R: Rng>(
    prior: &GmmPrior,
    schedule: &NoiseSchedule,
    plan: &NestedPlan,
    problem: &InverseProblem,
    rng: &mut R,
) -> Result<Trace> {
    let denoiser = MeasurementDenoiser::new(prior.clone(), problem.clone())?;
    nested::nested_sample(&denoiser, schedule, plan, rng)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs match.
pub fn psnr(x: &Vector, reference: &Vector, peak: f64) -> Result<f64> {
    if x.len() != reference.len() || x.is_empty() {
        return Err(param("psnr needs two vectors of the same positive length"));
    }
    if peak.is_nan() || peak <= 0.0 {
        return Err(param("psnr peak must be positive"));
    }
    let mse = (x - reference).norm_squared() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
