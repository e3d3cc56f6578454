//! `cameras.json`: an array of pinhole cameras with row-major 4×4
//! world-to-camera transforms.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::scene::Camera;

/// Largest accepted deviation of the rotation block from orthonormality.
pub const ORTHO_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: Vec<f64>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_cam: c.world_to_cam().iter().flatten().copied().collect(),
        }
    }
}

impl CameraRecord {
    /// Validates rigidity and snaps the rotation to the nearest orthonormal
    /// matrix.
    pub fn to_camera(&self) -> Result<Camera> {
        let err = |msg: String| Error::Camera { id: self.id, msg };
        let m = &self.world_to_cam;
        if m.len() != 16 {
            return Err(err(format!("world_to_cam needs 16 values, got {}", m.len())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(err("world_to_cam has non-finite entries".into()));
        }
        if m[12].abs() > ORTHO_TOL || m[13].abs() > ORTHO_TOL || m[14].abs() > ORTHO_TOL || (m[15] - 1.0).abs() > ORTHO_TOL {
            return Err(err(format!("last row must be 0 0 0 1, got {:?}", &m[12..])));
        }
        let r = Matrix3::from_fn(|i, j| m[i * 4 + j]);
        let det = r.determinant();
        if det <= 0.0 {
            return Err(err(format!("rotation has determinant {det:.6}; reflections are not rigid")));
        }
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(err(format!("rotation deviates from orthonormal by {dev:.2e} (tolerance {ORTHO_TOL:.0e})")));
        }
        let svd = r.svd(true, true);
        let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
        let polar = u * vt;
        let rot = [0, 1, 2].map(|i| [0, 1, 2].map(|j| polar[(i, j)]));
        Camera::new(self.id, self.width, self.height, self.fx, self.fy, self.cx, self.cy, rot, [m[3], m[7], m[11]])
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(path).at(path)?)?;
    records.iter().map(CameraRecord::to_camera).collect()
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    fs::write(path, serde_json::to_string_pretty(&records)?).at(path)?;
    Ok(())
}

/// Pose at `t ∈ [0, 1]` along the camera sequence: SLERP on rotations and
/// linear interpolation of centers between consecutive cameras. Intrinsics
/// come from the first camera.
pub fn interpolate_pose(cams: &[Camera], t: f64) -> Result<Camera> {
    let first = cams.first().ok_or_else(|| Error::Config("no cameras to interpolate".into()))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("sweep parameter {t} outside [0, 1]")));
    }
    if cams.len() == 1 {
        return Ok(first.clone());
    }
    let x = t * (cams.len() - 1) as f64;
    let k = (x.floor() as usize).min(cams.len() - 2);
    let f = x - k as f64;
    let (a, b) = (&cams[k], &cams[k + 1]);
    let quat = |c: &Camera| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_fn(|i, j| c.rot[i][j])));
    let q = quat(a).try_slerp(&quat(b), f, 1e-9).unwrap_or_else(|| if f < 0.5 { quat(a) } else { quat(b) });
    let (ca, cb) = (Vector3::from(a.center()), Vector3::from(b.center()));
    let center = ca + (cb - ca) * f;
    let r = q.to_rotation_matrix().into_inner();
    let trans = -(r * center);
    let rot = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)]));
    Camera::new(first.id, first.width, first.height, first.fx, first.fy, first.cx, first.cy, rot, [trans[0], trans[1], trans[2]])
}
