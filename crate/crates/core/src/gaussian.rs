//! Gaussian beliefs, deterministic sigma-point rules and covariance repair.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FilterError, Result};
use crate::linalg::{
    all_finite_mat, all_finite_vec, check_square, semidefinite_cholesky, symmetrize_in_place,
    SpdFactor,
};

/// A multivariate normal `N(mean, cov)`.
///
/// The covariance is symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov, "covariance")?;
        if cov.nrows() != mean.len() {
            return Err(FilterError::DimensionMismatch(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !all_finite_vec(&mean) || !all_finite_mat(&cov) {
            return Err(FilterError::InvalidBelief("non-finite entries".into()));
        }
        symmetrize_in_place(&mut cov);
        Ok(Self { mean, cov })
    }

    /// `N(mean, variance · I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    /// Caller guarantees finiteness, matching dimensions and symmetry.
    pub(crate) fn from_parts_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdRepairPolicy {
    /// Eigenvalue floor, scaled by `max(1, largest eigenvalue)`.
    pub eigen_floor: f64,
    pub symmetrize: bool,
}

impl Default for PsdRepairPolicy {
    fn default() -> Self {
        Self {
            eigen_floor: 1e-12,
            symmetrize: true,
        }
    }
}

/// Symmetrizes `cov` and lifts every eigenvalue to at least the policy floor.
///
/// The floor scales with the largest eigenvalue, which clamping leaves
/// untouched, so a second pass finds nothing to fix and returns its input.
pub fn psd_repair(cov: &DMatrix<f64>, policy: &PsdRepairPolicy) -> Result<DMatrix<f64>> {
    check_square(cov, "covariance")?;
    if !(policy.eigen_floor >= 0.0) {
        return Err(FilterError::InvalidArgument(
            "eigen_floor must be nonnegative".into(),
        ));
    }
    if !all_finite_mat(cov) {
        return Err(FilterError::NonFinite("covariance"));
    }
    let mut sym = cov.clone();
    if policy.symmetrize {
        symmetrize_in_place(&mut sym);
    }
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let top = eig.eigenvalues.iter().fold(1.0_f64, |a, x| a.max(*x));
    let floor = policy.eigen_floor * top;
    let slack = 64.0 * f64::EPSILON * largest;
    if eig.eigenvalues.iter().all(|&l| l >= floor - slack) {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Lower square-root factor of a covariance, repairing it first if it is not
/// numerically PSD.
pub(crate) fn covariance_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = cov.clone();
    symmetrize_in_place(&mut sym);
    if let Some(l) = semidefinite_cholesky(&sym) {
        return Ok(l);
    }
    let repaired = psd_repair(&sym, &PsdRepairPolicy::default())?;
    semidefinite_cholesky(&repaired).ok_or(FilterError::CovarianceNotPsd)
}

/// Weighted point set standing in for a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl SigmaPointSet {
    pub fn new(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(FilterError::InvalidArgument("empty point set".into()));
        }
        if points.len() != weights.len() {
            return Err(FilterError::DimensionMismatch(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(FilterError::DimensionMismatch(
                "points of differing dimension".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(FilterError::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Deterministic rule mapping a Gaussian to reference points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointRule {
    /// Classic unscented transform with a single spread parameter. `None`
    /// picks `max(0, 3 - d)`.
    Unscented { kappa: Option<f64> },
    /// Third-degree spherical-radial cubature.
    Cubature,
    /// The mean alone, with weight one. Degenerate; useful for checks.
    MeanOnly,
}

impl Default for PointRule {
    fn default() -> Self {
        PointRule::Unscented { kappa: None }
    }
}

pub fn default_kappa(dim: usize) -> f64 {
    (3.0 - dim as f64).max(0.0)
}

impl PointRule {
    pub fn point_count(&self, dim: usize) -> usize {
        match self {
            PointRule::Unscented { .. } => 2 * dim + 1,
            PointRule::Cubature => 2 * dim,
            PointRule::MeanOnly => 1,
        }
    }

    pub fn generate(&self, belief: &GaussianBelief) -> Result<SigmaPointSet> {
        match *self {
            PointRule::Unscented { kappa } => {
                unscented_points(belief, kappa.unwrap_or_else(|| default_kappa(belief.dim())))
            }
            PointRule::Cubature => cubature_points(belief),
            PointRule::MeanOnly => Ok(SigmaPointSet {
                points: vec![belief.mean.clone()],
                weights: vec![1.0],
            }),
        }
    }
}

/// Julier's unscented points: the mean plus `mean ± column_j(√((d+κ)·C))`.
pub fn unscented_points(belief: &GaussianBelief, kappa: f64) -> Result<SigmaPointSet> {
    let d = belief.dim();
    if d == 0 {
        return Err(FilterError::InvalidBelief("zero-dimensional belief".into()));
    }
    if !kappa.is_finite() || kappa <= -(d as f64) {
        return Err(FilterError::InvalidArgument(format!(
            "kappa must exceed -{d}, got {kappa}"
        )));
    }
    let scale = d as f64 + kappa;
    let l = covariance_sqrt(&belief.cov)? * scale.sqrt();
    let mut points = Vec::with_capacity(2 * d + 1);
    let mut weights = Vec::with_capacity(2 * d + 1);
    points.push(belief.mean.clone());
    weights.push(kappa / scale);
    for j in 0..d {
        let col = l.column(j);
        points.push(&belief.mean + col);
        weights.push(0.5 / scale);
    }
    for j in 0..d {
        let col = l.column(j);
        points.push(&belief.mean - col);
        weights.push(0.5 / scale);
    }
    Ok(SigmaPointSet { points, weights })
}

/// Spherical cubature points `mean ± √d · column_j(chol C)` with equal weights.
pub fn cubature_points(belief: &GaussianBelief) -> Result<SigmaPointSet> {
    let d = belief.dim();
    if d == 0 {
        return Err(FilterError::InvalidBelief("zero-dimensional belief".into()));
    }
    let l = covariance_sqrt(&belief.cov)? * (d as f64).sqrt();
    let w = 1.0 / (2 * d) as f64;
    let mut points = Vec::with_capacity(2 * d);
    for j in 0..d {
        points.push(&belief.mean + l.column(j));
    }
    for j in 0..d {
        points.push(&belief.mean - l.column(j));
    }
    Ok(SigmaPointSet {
        points,
        weights: vec![w; 2 * d],
    })
}

/// Weighted mean and covariance of an arbitrary weighted point list.
pub(crate) fn weighted_moments(
    points: &[DVector<f64>],
    weights: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let mut mean = DVector::<f64>::zeros(d);
    for (p, &w) in points.iter().zip(weights) {
        mean.axpy(w, p, 1.0);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (p, &w) in points.iter().zip(weights) {
        let dev = p - &mean;
        cov.ger(w, &dev, &dev, 1.0);
    }
    symmetrize_in_place(&mut cov);
    (mean, cov)
}

pub fn moments_from_points(set: &SigmaPointSet) -> Result<GaussianBelief> {
    if set.is_empty() {
        return Err(FilterError::InvalidArgument("empty point set".into()));
    }
    let (mean, cov) = weighted_moments(&set.points, &set.weights);
    let cov = psd_repair(&cov, &PsdRepairPolicy::default())?;
    GaussianBelief::new(mean, cov)
}

/// `log N(x | mean, cov)`.
pub fn gaussian_logpdf(x: &DVector<f64>, belief: &GaussianBelief) -> Result<f64> {
    if x.len() != belief.dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "point has dimension {}, belief {}",
            x.len(),
            belief.dim()
        )));
    }
    if !all_finite_vec(x) {
        return Err(FilterError::NonFinite("evaluation point"));
    }
    let factor = match SpdFactor::new(&belief.cov) {
        Some(f) => f,
        None => {
            let repaired = psd_repair(&belief.cov, &PsdRepairPolicy::default())?;
            SpdFactor::new(&repaired).ok_or(FilterError::DegenerateDensity)?
        }
    };
    let log_det = factor.log_det();
    if !log_det.is_finite() {
        return Err(FilterError::DegenerateDensity);
    }
    let r = x - &belief.mean;
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * PI).ln() + log_det + factor.mahalanobis(&r)))
}
