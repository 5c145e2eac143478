//! Per-run parameter transforms and the change-of-variables corrections that
//! bring densities and expected log-joints back to the common parameter space.
//!
//! A transform maps common-space parameters `θ` to run coordinates
//! `z = A·ℓ(θ) + b`, where `ℓ` is an optional per-coordinate logit squashing
//! stage for bounded variables and the identity otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mixture::GaussianComponent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Affine,
    BoundedAffine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTransform {
    kind: TransformKind,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    b: DVector<f64>,
    log_abs_det_a: f64,
    bounds: Option<(Vec<f64>, Vec<f64>)>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ParamTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: TransformKind::Identity,
            a: DMatrix::identity(dim, dim),
            a_inv: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
            log_abs_det_a: 0.0,
            bounds: None,
        }
    }

    pub fn affine(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        Self::build(TransformKind::Affine, a, b, None)
    }

    pub fn bounded_affine(
        a: DMatrix<f64>,
        b: DVector<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        Self::build(TransformKind::BoundedAffine, a, b, Some((lower, upper)))
    }

    /// Whitening map `z = L⁻¹(θ − μ)` for `Σ = L Lᵀ`.
    pub fn whitening(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let l = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("whitening covariance".into()))?
            .l();
        let a = l
            .solve_lower_triangular(&DMatrix::identity(mean.len(), mean.len()))
            .ok_or_else(|| Error::NotPositiveDefinite("whitening factor".into()))?;
        let b = -(&a * mean);
        Self::affine(a, b)
    }

    fn build(
        kind: TransformKind,
        a: DMatrix<f64>,
        b: DVector<f64>,
        bounds: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let d = b.len();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: a.nrows(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument("transform has non-finite entries".into()));
        }
        let lu = a.clone().lu();
        let u = lu.u();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if (0..d).any(|i| u[(i, i)].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::Argument("transform matrix is singular".into()));
        }
        let log_abs_det_a = (0..d).map(|i| u[(i, i)].abs().ln()).sum();
        let a_inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Argument("transform matrix is singular".into()))?;
        if let Some((lo, hi)) = &bounds {
            check_dim(d, lo.len())?;
            check_dim(d, hi.len())?;
            if lo.iter().zip(hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::Argument("bounds must satisfy lower < upper".into()));
            }
        }
        Ok(Self {
            kind,
            a,
            a_inv,
            b,
            log_abs_det_a,
            bounds,
        })
    }

    /// `z ↦ A2 z + b2` applied after this transform.
    pub fn then_affine(&self, a2: &DMatrix<f64>, b2: &DVector<f64>) -> Result<Self> {
        let a = a2 * &self.a;
        let b = a2 * &self.b + b2;
        let kind = match self.kind {
            TransformKind::BoundedAffine => TransformKind::BoundedAffine,
            _ => TransformKind::Affine,
        };
        Self::build(kind, a, b, self.bounds.clone())
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn bounds(&self) -> Option<(&[f64], &[f64])> {
        self.bounds.as_ref().map(|(l, h)| (l.as_slice(), h.as_slice()))
    }

    /// True when the transform has no nonlinear stage.
    pub fn is_linear(&self) -> bool {
        self.bounds.is_none()
    }

    /// `z = g(θ)`.
    pub fn apply(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        if self.kind == TransformKind::Identity {
            return Ok(theta.to_vec());
        }
        let u: Vec<f64> = match &self.bounds {
            None => theta.to_vec(),
            Some((lo, hi)) => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .enumerate()
                .map(|(i, (&x, (&l, &h)))| {
                    if !(x > l && x < h) {
                        return Err(Error::Domain(format!(
                            "coordinate {i} = {x} outside ({l}, {h})"
                        )));
                    }
                    let t = (x - l) / (h - l);
                    Ok((t / (1.0 - t)).ln())
                })
                .collect::<Result<_>>()?,
        };
        Ok((&self.a * DVector::from_vec(u) + &self.b).data.into())
    }

    fn unsquash(&self, z: &[f64]) -> DVector<f64> {
        &self.a_inv * (DVector::from_column_slice(z) - &self.b)
    }

    /// `θ = g⁻¹(z)`.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(self.invert_unchecked(z))
    }

    pub fn invert_unchecked(&self, z: &[f64]) -> Vec<f64> {
        if self.kind == TransformKind::Identity {
            return z.to_vec();
        }
        let u = self.unsquash(z);
        match &self.bounds {
            None => u.data.into(),
            Some((lo, hi)) => u
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&l, &h))| l + (h - l) * sigmoid(v))
                .collect(),
        }
    }

    /// `log |det ∂g⁻¹(z)/∂z|`.
    pub fn log_abs_det_jacobian_inverse(&self, z: &[f64]) -> f64 {
        match &self.bounds {
            None => -self.log_abs_det_a,
            Some((lo, hi)) => {
                let u = self.unsquash(z);
                let squash: f64 = u
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(&v, (&l, &h))| (h - l).ln() - softplus(-v) - softplus(v))
                    .sum();
                squash - self.log_abs_det_a
            }
        }
    }

    /// Common-space log-density of a run-space component:
    /// `log q(g(θ)) − log J(g(θ))`.
    pub fn corrected_log_density(&self, comp: &GaussianComponent, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), comp.dim())?;
        let z = self.apply(theta)?;
        Ok(comp.log_pdf_unchecked(&z) - self.log_abs_det_jacobian_inverse(&z))
    }

    /// `Î = L̂ − mean_s log J(z_s)` over the supplied run-space samples.
    pub fn correct_expected_log_joint(&self, l_hat: f64, samples: &[Vec<f64>]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Argument("expected-log-joint correction needs samples".into()));
        }
        if self.is_linear() {
            return Ok(l_hat + self.log_abs_det_a);
        }
        let mean_log_j = samples
            .iter()
            .map(|z| self.log_abs_det_jacobian_inverse(z))
            .sum::<f64>()
            / samples.len() as f64;
        Ok(l_hat - mean_log_j)
    }

    /// Exact common-space Gaussian for linear transforms, `None` when a
    /// bounded stage is present.
    pub fn common_space_gaussian(&self, comp: &GaussianComponent) -> Result<Option<GaussianComponent>> {
        if !self.is_linear() {
            return Ok(None);
        }
        if self.kind == TransformKind::Identity {
            return Ok(Some(comp.clone()));
        }
        let c = -(&self.a_inv * &self.b);
        comp.affine_image(&self.a_inv, &c).map(Some)
    }

    /// Mean and variance of the pre-squash coordinate `u_dim` under `comp`.
    fn unsquashed_marginal(&self, comp: &GaussianComponent, dim: usize) -> (f64, f64) {
        let row = self.a_inv.row(dim);
        let mean = (row * (comp.mean() - &self.b))[0];
        let var = (row * comp.cov() * row.transpose())[0];
        (mean, var)
    }

    /// Common-space marginal density of `comp` along `dim` on `grid`.
    pub fn marginal_pdf(&self, comp: &GaussianComponent, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), comp.dim())?;
        if dim >= self.dim() {
            return Err(Error::Argument(format!("dimension {dim} out of range")));
        }
        let (m, v) = self.unsquashed_marginal(comp, dim);
        let norm = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
        Ok(match &self.bounds {
            None => grid
                .iter()
                .map(|&x| (norm - 0.5 * (x - m).powi(2) / v).exp())
                .collect(),
            Some((lo, hi)) => {
                let (l, h) = (lo[dim], hi[dim]);
                grid.iter()
                    .map(|&x| {
                        if !(x > l && x < h) {
                            return 0.0;
                        }
                        let t = (x - l) / (h - l);
                        let u = (t / (1.0 - t)).ln();
                        (norm - 0.5 * (u - m).powi(2) / v).exp() / ((h - l) * t * (1.0 - t))
                    })
                    .collect()
            }
        })
    }

    pub fn to_data(&self) -> TransformData {
        let d = self.dim();
        TransformData {
            kind: self.kind,
            a: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| self.a[(i, j)]).collect(),
            b: self.b.as_slice().to_vec(),
            bounds: self.bounds.as_ref().map(|(l, h)| BoundsData {
                lower: l.clone(),
                upper: h.clone(),
            }),
        }
    }

    pub fn from_data(data: &TransformData, dim: usize) -> Result<Self> {
        let field = |f: &str, reason: String| Error::Parse {
            field: format!("transform.{f}"),
            reason,
        };
        if data.b.len() != dim {
            return Err(field("b", format!("expected {dim} entries, got {}", data.b.len())));
        }
        if data.a.len() != dim * dim {
            return Err(field("A", format!("expected {} entries, got {}", dim * dim, data.a.len())));
        }
        let a = DMatrix::from_row_slice(dim, dim, &data.a);
        let b = DVector::from_column_slice(&data.b);
        match data.kind {
            TransformKind::Identity => {
                if a != DMatrix::identity(dim, dim) || b.iter().any(|v| *v != 0.0) {
                    return Err(field("A", "identity transform must have A = I, b = 0".into()));
                }
                Ok(Self::identity(dim))
            }
            TransformKind::Affine => Self::affine(a, b),
            TransformKind::BoundedAffine => {
                let bd = data
                    .bounds
                    .as_ref()
                    .ok_or_else(|| field("bounds", "required for bounded_affine".into()))?;
                Self::bounded_affine(a, b, bd.lower.clone(), bd.upper.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsData {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Run-file representation: kind tag, row-major `A`, `b`, optional bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformData {
    pub kind: TransformKind,
    #[serde(rename = "A", deserialize_with = "de_matrix")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsData>,
}

/// Accepts `A` either flat (row-major) or as a list of rows.
fn de_matrix<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flat(Vec<f64>),
        Rows(Vec<Vec<f64>>),
    }
    Ok(match Repr::deserialize(d)? {
        Repr::Flat(v) => v,
        Repr::Rows(r) => r.into_iter().flatten().collect(),
    })
}
