//! Pinhole camera model and the conversions between image, camera, LiDAR and
//! bird's-eye-view (BEV) coordinates.
//!
//! Frame conventions:
//!
//! - LiDAR frame: x forward, y left, z up. The ground plane is `z = 0`.
//! - Camera frame: x right, y down, z forward (optical axis).
//! - BEV: the LiDAR `(x, y)` ground coordinates.
//!
//! The extrinsics `[R|T]` map LiDAR points into the camera frame,
//! `p_cam = R * p_lidar + T`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mining::Detection;

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("point is behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointImage {
    pub u: f64,
    pub v: f64,
}

impl PointImage {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// A point in the camera frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCam {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PointCam {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

impl From<Vector3<f64>> for PointCam {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// A point on the LiDAR-frame ground plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointBev {
    pub x: f64,
    pub y: f64,
}

impl PointBev {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PointBev) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pinhole intrinsics (zero skew) plus LiDAR-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraRig {
    /// Builds a rig, checking positive focal lengths and a proper rotation.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeomError::InvalidRig(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeomError::InvalidRig("non-finite principal point".into()));
        }
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(GeomError::InvalidRig("non-finite extrinsics".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > ROTATION_TOL {
            return Err(GeomError::InvalidRig(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeomError::InvalidRig(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera mounted `height` meters above the LiDAR origin on the ground,
    /// looking along LiDAR +x and pitched down by `pitch` radians.
    pub fn forward_facing(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        height: f64,
        pitch: f64,
    ) -> Result<Self, GeomError> {
        // LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd).
        let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        // Positive pitch tilts the optical axis towards the ground.
        let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch);
        let rotation = tilt.matrix() * axes;
        let center = Vector3::new(0.0, 0.0, height);
        let translation = -(rotation * center);
        Self::new(fx, fy, cx, cy, rotation, translation)
    }

    /// KITTI-like front camera: 1242x375 image, 1.65 m mounting height, level.
    pub fn kitti_like() -> Self {
        Self::forward_facing(721.5377, 721.5377, 609.5593, 172.854, 1.65, 0.0)
            .expect("constant rig is valid")
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    /// Camera center expressed in the LiDAR frame.
    pub fn center_lidar(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn lidar_to_camera(&self, p_lidar: &Vector3<f64>) -> PointCam {
        PointCam::from(self.rotation * p_lidar + self.translation)
    }
}

/// Projects a LiDAR-frame point to pixels, returning the camera-frame depth too.
pub fn project_point(
    rig: &CameraRig,
    p_lidar: &Vector3<f64>,
) -> Result<(PointImage, f64), GeomError> {
    let p = rig.lidar_to_camera(p_lidar);
    if p.z <= MIN_DEPTH {
        return Err(GeomError::BehindCamera { z: p.z });
    }
    let u = rig.fx * p.x / p.z + rig.cx;
    let v = rig.fy * p.y / p.z + rig.cy;
    Ok((PointImage::new(u, v), p.z))
}

/// Back-projects a pixel at camera-frame depth `z`: `K^-1 [z*u, z*v, z]`.
pub fn image_to_camera(rig: &CameraRig, pt: PointImage, z: f64) -> Result<PointCam, GeomError> {
    if !(z > 0.0) {
        return Err(GeomError::NonPositiveDepth(z));
    }
    Ok(PointCam::new(
        (pt.u - rig.cx) * z / rig.fx,
        (pt.v - rig.cy) * z / rig.fy,
        z,
    ))
}

/// Inverse extrinsics: `R^T (p - T)`.
pub fn camera_to_lidar(rig: &CameraRig, p: PointCam) -> Vector3<f64> {
    rig.rotation.transpose() * (p.to_vector() - rig.translation)
}

pub fn to_bev(p_lidar: &Vector3<f64>) -> PointBev {
    PointBev::new(p_lidar.x, p_lidar.y)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = yaw.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Ground-truth 3D box. `center` is the bottom-face center in the LiDAR frame
/// and `yaw` is measured about the LiDAR up axis from +x.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(
        center: Vector3<f64>,
        length: f64,
        width: f64,
        height: f64,
        yaw: f64,
    ) -> Result<Self, GeomError> {
        if !(length > 0.0 && width > 0.0 && height > 0.0) {
            return Err(GeomError::InvalidBox(format!(
                "dimensions must be positive, got l={length}, w={width}, h={height}"
            )));
        }
        if center.iter().any(|x| !x.is_finite()) || !yaw.is_finite() {
            return Err(GeomError::InvalidBox("non-finite pose".into()));
        }
        Ok(Self {
            center,
            length,
            width,
            height,
            yaw: normalize_yaw(yaw),
        })
    }
}

/// Bottom center followed by the 4 bottom corners of a footprint centered at
/// `center`. Corners run counterclockwise seen from above, starting at
/// `(+l/2, +w/2)` in the box frame.
fn footprint_points(center: &Vector3<f64>, length: f64, width: f64, yaw: f64) -> [Vector3<f64>; 5] {
    let (s, c) = yaw.sin_cos();
    let hl = 0.5 * length;
    let hw = 0.5 * width;
    let corner = |dx: f64, dy: f64| Vector3::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy, center.z);
    [
        *center,
        corner(hl, hw),
        corner(-hl, hw),
        corner(-hl, -hw),
        corner(hl, -hw),
    ]
}

/// Bottom center then the 4 bottom corners of `b`, in the LiDAR frame.
pub fn bottom_points_lidar(b: &Box3D) -> [Vector3<f64>; 5] {
    footprint_points(&b.center, b.length, b.width, b.yaw)
}

/// The 5 BEV candidate points of a detection, derived from its 3D attributes:
/// the bottom-center keypoint is lifted to the predicted depth, moved to the
/// LiDAR frame, and the footprint is rebuilt from the predicted size and yaw.
pub fn detection_bev_points(rig: &CameraRig, det: &Detection) -> Result<[PointBev; 5], GeomError> {
    let center_cam = image_to_camera(rig, det.keypoints[0], det.depth)?;
    let center = camera_to_lidar(rig, center_cam);
    let [l, w, _] = det.size;
    Ok(footprint_points(&center, l, w, det.yaw).map(|p| to_bev(&p)))
}

/// BEV position of the detection's bottom center only.
pub fn detection_bev_center(rig: &CameraRig, det: &Detection) -> Result<PointBev, GeomError> {
    let center_cam = image_to_camera(rig, det.keypoints[0], det.depth)?;
    Ok(to_bev(&camera_to_lidar(rig, center_cam)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn simple_rig() -> CameraRig {
        CameraRig::new(1000.0, 1000.0, 640.0, 360.0, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn projects_principal_axis_point() {
        let (pt, z) = project_point(&simple_rig(), &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!((pt.u, pt.v, z), (640.0, 360.0, 10.0));
    }

    #[test]
    fn projects_off_axis_point() {
        let (pt, z) = project_point(&simple_rig(), &Vector3::new(1.0, 0.0, 10.0)).unwrap();
        assert!((pt.u - 740.0).abs() < 1e-12);
        assert!((pt.v - 360.0).abs() < 1e-12);
        assert_eq!(z, 10.0);
    }

    #[test]
    fn rejects_points_behind_camera() {
        let err = project_point(&simple_rig(), &Vector3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera { .. }));
        let err = project_point(&simple_rig(), &Vector3::new(0.0, 0.0, 1e-7)).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera { .. }));
    }

    #[test]
    fn unprojects_pixels() {
        let rig = simple_rig();
        let p = image_to_camera(&rig, PointImage::new(640.0, 360.0), 10.0).unwrap();
        assert_eq!(p, PointCam::new(0.0, 0.0, 10.0));
        let p = image_to_camera(&rig, PointImage::new(740.0, 360.0), 10.0).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.z == 10.0);
        assert_eq!(
            image_to_camera(&rig, PointImage::new(1.0, 1.0), 0.0),
            Err(GeomError::NonPositiveDepth(0.0))
        );
    }

    #[test]
    fn inverts_extrinsics() {
        let rig = simple_rig();
        let p = camera_to_lidar(&rig, PointCam::new(1.0, 2.0, 3.0));
        assert_eq!(p, Vector3::new(1.0, 2.0, 3.0));

        let shifted = CameraRig::new(
            1000.0,
            1000.0,
            640.0,
            360.0,
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 5.0),
        )
        .unwrap();
        assert_eq!(camera_to_lidar(&shifted, PointCam::new(0.0, 0.0, 5.0)), Vector3::zeros());
    }

    #[test]
    fn bev_drops_height() {
        for z in [0.0, 3.0, -0.5] {
            assert_eq!(to_bev(&Vector3::new(1.0, 2.0, z)), PointBev::new(1.0, 2.0));
        }
    }

    #[test]
    fn axis_aligned_footprint() {
        let b = Box3D::new(Vector3::zeros(), 2.0, 1.0, 1.5, 0.0).unwrap();
        let pts = bottom_points_lidar(&b);
        let expected = [
            [0.0, 0.0],
            [1.0, 0.5],
            [-1.0, 0.5],
            [-1.0, -0.5],
            [1.0, -0.5],
        ];
        for (p, e) in pts.iter().zip(expected) {
            assert_eq!([p.x, p.y, p.z], [e[0], e[1], 0.0]);
        }
    }

    #[test]
    fn rotated_footprint() {
        let b = Box3D::new(Vector3::zeros(), 2.0, 1.0, 1.5, FRAC_PI_2).unwrap();
        let pts = bottom_points_lidar(&b);
        let expected = [[-0.5, 1.0], [-0.5, -1.0], [0.5, -1.0], [0.5, 1.0]];
        for (p, e) in pts[1..].iter().zip(expected) {
            assert!((p.x - e[0]).abs() < 1e-12 && (p.y - e[1]).abs() < 1e-12, "{p:?} vs {e:?}");
        }
        let centroid = pts[1..].iter().sum::<Vector3<f64>>() / 4.0;
        assert!((centroid - pts[0]).norm() < 1e-12);
    }

    #[test]
    fn yaw_normalization() {
        use std::f64::consts::PI;
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(0.5) - 0.5).abs() < 1e-15);
        assert!((normalize_yaw(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rigs_and_boxes() {
        let bad_rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, bad_rot, Vector3::zeros()).is_err());
        assert!(CameraRig::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros()).is_err());
        assert!(Box3D::new(Vector3::zeros(), 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn kitti_rig_sees_the_road_ahead() {
        let rig = CameraRig::kitti_like();
        assert!((rig.center_lidar() - Vector3::new(0.0, 0.0, 1.65)).norm() < 1e-12);
        let (pt, z) = project_point(&rig, &Vector3::new(20.0, 0.0, 0.0)).unwrap();
        assert!((z - 20.0).abs() < 1e-12);
        assert!((pt.u - rig.cx()).abs() < 1e-9);
        // Ground ahead lies below the horizon row.
        assert!(pt.v > rig.cy());
    }
}
