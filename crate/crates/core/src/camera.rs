//! Pinhole camera fixed at the origin.
//!
//! Objects sit in front of the camera at positive camera-space `z` (the
//! default object depth is 2.732), so `depth = z`. NDC is `f * (x, y) / z`
//! with `y` pointing up; image rows grow downwards.

use serde::{Deserialize, Serialize};
use softmesh_tensor::{Array, Tape, Var};

use crate::error::{invalid, Error, Result};
use crate::geometry::Vec3;

/// How the intrinsics are specified; both reduce to a focal length in NDC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intrinsics {
    Focal(f64),
    /// Full field of view in degrees.
    FovDegrees(f64),
}

impl Intrinsics {
    pub fn focal(self) -> f64 {
        match self {
            Intrinsics::Focal(f) => f,
            Intrinsics::FovDegrees(d) => 1.0 / (d.to_radians() / 2.0).tan(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let focal = intrinsics.focal();
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(invalid(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image size must be non-zero"));
        }
        if !(near > 0.0 && near < far) {
            return Err(invalid(format!("need 0 < near < far, got near {near}, far {far}")));
        }
        Ok(Camera {
            focal,
            width,
            height,
            near,
            far,
        })
    }

    /// f = 3.732 at `size`×`size`, near 1, far 100.
    pub fn synthetic(size: usize) -> Self {
        Camera::new(Intrinsics::Focal(3.732), size, size, 1.0, 100.0).unwrap()
    }

    pub fn with_size(self, width: usize, height: usize) -> Self {
        Camera { width, height, ..self }
    }

    /// NDC position and depth of one point.
    pub fn project_point(&self, p: Vec3) -> Option<([f64; 2], f64)> {
        if !(p[2] > self.near) {
            return None;
        }
        Some(([self.focal * p[0] / p[2], self.focal * p[1] / p[2]], p[2]))
    }

    pub fn project(&self, points: &[Vec3]) -> Result<Vec<([f64; 2], f64)>> {
        points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                self.project_point(p).ok_or(Error::BehindNearPlane {
                    index: i,
                    depth: p[2],
                    near: self.near,
                })
            })
            .collect()
    }

    /// Differentiable projection of an N×3 node: returns (N×2 NDC, N depth).
    pub fn project_tape(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var)> {
        let v = tape.value(points);
        if v.ndim() != 2 || v.shape()[1] != 3 {
            return Err(invalid(format!("project expects N×3 points, got {:?}", v.shape())));
        }
        if let Some(i) = v.data().chunks(3).position(|p| !(p[2] > self.near)) {
            return Err(Error::BehindNearPlane {
                index: i,
                depth: v.data()[3 * i + 2],
                near: self.near,
            });
        }
        let n = v.shape()[0];
        let xy = tape.slice(points, 1, 0, 2)?;
        let z = tape.slice(points, 1, 2, 1)?;
        let ratio = tape.div(xy, z)?;
        let ndc = tape.scale(ratio, self.focal);
        let depth = tape.reshape(z, &[n])?;
        Ok((ndc, depth))
    }

    /// NDC coordinates of the center of pixel (column, row).
    pub fn pixel_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0,
            1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0,
        ]
    }

    /// Continuous pixel coordinates (column, row) of an NDC position, in
    /// units where pixel centers sit at half-integers.
    pub fn ndc_to_pixel(&self, ndc: [f64; 2]) -> [f64; 2] {
        [
            (ndc[0] + 1.0) / 2.0 * self.width as f64,
            (1.0 - ndc[1]) / 2.0 * self.height as f64,
        ]
    }
}

/// Constant N×3 node holding some points, for callers without a tape.
pub fn points_array(points: &[Vec3]) -> Array {
    Array::new([points.len(), 3], points.iter().flatten().copied().collect()).unwrap()
}
