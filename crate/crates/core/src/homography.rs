//! Image-to-BEV plane homographies.
//!
//! A [`HomographyMatrix`] maps homogeneous pixel coordinates `[u, v, 1]` to
//! homogeneous ground coordinates `[x, y, 1]`. Matrices are only meaningful up
//! to scale; they are stored with unit Frobenius norm.
//!
//! [`dlt_solve`] is the normalized Direct Linear Transform: both point sets are
//! conditioned (zero mean, mean distance sqrt(2)), the `2N x 9` system is solved
//! through its smallest right singular vector, and the result is de-normalized.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geom::{CameraRig, PointBev, PointImage};

/// `|w|` at or below this is treated as a point at infinity.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;
/// Minimum ratio between the two smallest singular values of the DLT system.
pub const NULLSPACE_GAP: f64 = 10.0;
/// Minimum `s_min / s_max` of a usable homography.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HomographyError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("point maps to infinity (w = {0:e})")]
    PointAtInfinity(f64),
    #[error("invalid homography matrix: {0}")]
    InvalidMatrix(String),
}

/// A 3x3 projective map from image pixels to BEV meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMatrix {
    m: Matrix3<f64>,
}

impl HomographyMatrix {
    /// Wraps `m`, rescaling it to unit Frobenius norm.
    pub fn new(m: Matrix3<f64>) -> Result<Self, HomographyError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(HomographyError::InvalidMatrix("non-finite entry".into()));
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(HomographyError::InvalidMatrix("zero matrix".into()));
        }
        Ok(Self { m: m / norm })
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is valid")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Flips the overall sign if needed so that `pt` maps with positive `w`.
    pub fn oriented_towards(self, pt: PointImage) -> Self {
        let w = self.m.row(2).dot(&Vector3::new(pt.u, pt.v, 1.0).transpose());
        if w < 0.0 {
            Self { m: -self.m }
        } else {
            self
        }
    }

    /// Singular values, descending.
    pub fn singular_values(&self) -> [f64; 3] {
        let mut s: Vec<f64> = self.m.svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        [s[0], s[1], s[2]]
    }

    pub fn is_rank3(&self) -> bool {
        let s = self.singular_values();
        s[2] > RANK_TOL * s[0]
    }

    /// `self` followed by the BEV-plane map `after`.
    pub fn then(&self, after: &Matrix3<f64>) -> Result<Self, HomographyError> {
        Self::new(after * self.m)
    }

    pub fn apply(&self, pt: PointImage) -> Result<PointBev, HomographyError> {
        apply_matrix(&self.m, pt)
    }
}

/// Applies an arbitrary (unnormalized) 3x3 matrix with perspective division.
pub fn apply_matrix(m: &Matrix3<f64>, pt: PointImage) -> Result<PointBev, HomographyError> {
    let h = m * Vector3::new(pt.u, pt.v, 1.0);
    if h.z.abs() <= MIN_HOMOGENEOUS_W {
        return Err(HomographyError::PointAtInfinity(h.z));
    }
    Ok(PointBev::new(h.x / h.z, h.y / h.z))
}

/// An image point paired with its BEV coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub img: PointImage,
    pub bev: PointBev,
}

impl Correspondence {
    pub fn new(img: PointImage, bev: PointBev) -> Self {
        Self { img, bev }
    }
}

/// Similarity transform moving the centroid to the origin with mean distance
/// sqrt(2), returned with the normalized points.
fn hartley_normalize(points: &[(f64, f64)]) -> Result<(Matrix3<f64>, Vec<(f64, f64)>), HomographyError> {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points.iter().map(|&(x, y)| (x - mx).hypot(y - my)).sum::<f64>() / n;
    if !(mean_dist > 0.0 && mean_dist.is_finite()) {
        return Err(HomographyError::DegenerateConfiguration(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0);
    let normalized = points.iter().map(|&(x, y)| (s * (x - mx), s * (y - my))).collect();
    Ok((t, normalized))
}

/// Least-squares homography from image points to BEV points (normalized DLT).
pub fn dlt_solve(pairs: &[Correspondence]) -> Result<HomographyMatrix, HomographyError> {
    let n = pairs.len();
    if n < 4 {
        return Err(HomographyError::TooFewPoints(n));
    }
    if pairs
        .iter()
        .any(|p| ![p.img.u, p.img.v, p.bev.x, p.bev.y].iter().all(|x| x.is_finite()))
    {
        return Err(HomographyError::DegenerateConfiguration(
            "non-finite correspondence".into(),
        ));
    }

    let img: Vec<(f64, f64)> = pairs.iter().map(|p| (p.img.u, p.img.v)).collect();
    let bev: Vec<(f64, f64)> = pairs.iter().map(|p| (p.bev.x, p.bev.y)).collect();
    let (t_img, img_n) = hartley_normalize(&img)?;
    let (t_bev, bev_n) = hartley_normalize(&bev)?;

    // Rows from [x, y, 1]^T x (H [u, v, 1]^T) = 0. Padded to at least 9 rows so
    // the SVD exposes the full right singular basis.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&(u, v), &(x, y))) in img_n.iter().zip(bev_n.iter()).enumerate() {
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -u;
        a[(r0, 1)] = -v;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = x * u;
        a[(r0, 7)] = x * v;
        a[(r0, 8)] = x;

        a[(r1, 3)] = -u;
        a[(r1, 4)] = -v;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = y * u;
        a[(r1, 7)] = y * v;
        a[(r1, 8)] = y;
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| HomographyError::DegenerateConfiguration("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |k: usize| svd.singular_values[order[k]];
    let (largest, second_smallest, smallest) = (s(0), s(7), s(8));

    // A second (near-)null direction means the solution is not unique.
    if second_smallest <= RANK_TOL * largest || second_smallest < NULLSPACE_GAP * smallest {
        return Err(HomographyError::DegenerateConfiguration(format!(
            "ill-determined nullspace (singular values {second_smallest:e}, {smallest:e})"
        )));
    }

    let h = v_t.row(order[8]);
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_bev_inv = t_bev
        .try_inverse()
        .ok_or_else(|| HomographyError::DegenerateConfiguration("singular conditioning".into()))?;
    let m = HomographyMatrix::new(t_bev_inv * h_norm * t_img)?;
    if !m.is_rank3() {
        return Err(HomographyError::DegenerateConfiguration(
            "estimated homography is rank deficient".into(),
        ));
    }

    let (su, sv) = img.iter().fold((0.0, 0.0), |(a, b), &(u, v)| (a + u, b + v));
    Ok(m.oriented_towards(PointImage::new(su / n as f64, sv / n as f64)))
}

/// `min_s ||A/|A| - s B/|B|||_F` over `s` in `{+1, -1}`.
pub fn up_to_scale_distance(a: &HomographyMatrix, b: &HomographyMatrix) -> f64 {
    let a = a.m / a.m.norm();
    let b = b.m / b.m.norm();
    (a - b).norm().min((a + b).norm())
}

/// Exact image-to-ground homography of a rig: the inverse of
/// `K [r1 r2 T]`, where `r1`, `r2` are the first two columns of `R`.
pub fn ground_truth_homography(rig: &CameraRig) -> Result<HomographyMatrix, HomographyError> {
    let r = rig.rotation();
    let mut ground_to_image = Matrix3::zeros();
    ground_to_image.set_column(0, &r.column(0));
    ground_to_image.set_column(1, &r.column(1));
    ground_to_image.set_column(2, rig.translation());
    let ground_to_image = rig.intrinsic_matrix() * ground_to_image;

    let g = HomographyMatrix::new(ground_to_image)?;
    if !g.is_rank3() {
        return Err(HomographyError::DegenerateConfiguration(
            "camera center lies on the ground plane".into(),
        ));
    }
    let inv = ground_to_image.try_inverse().ok_or_else(|| {
        HomographyError::DegenerateConfiguration("ground-to-image map is singular".into())
    })?;
    Ok(HomographyMatrix::new(inv)?.oriented_towards(PointImage::new(rig.cx(), rig.cy() + 100.0)))
}

/// Mean BEV distance between `apply(m, img)` and `bev` over the pairs;
/// points that map to infinity count as infinite error.
pub fn mean_reprojection_error(m: &HomographyMatrix, pairs: &[Correspondence]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| m.apply(p.img).map_or(f64::INFINITY, |q| q.distance(&p.bev)))
        .sum::<f64>()
        / pairs.len() as f64
}
