//! Pinhole cameras and ray generation.
//!
//! Camera space looks down `-Z` with `+Y` up; pixel rows run top to bottom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A world-space ray with its integration interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
}

/// Pinhole camera with a camera-to-world pose (row-major 4×4).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub pose_c2w: [f64; 16],
}

pub const IDENTITY_POSE: [f64; 16] = [
    1.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 0.0, 0.0, //
    0.0, 0.0, 1.0, 0.0, //
    0.0, 0.0, 0.0, 1.0,
];

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(
        fov_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
        pose_c2w: [f64; 16],
    ) -> Result<Self> {
        let cam = Self {
            fov_deg,
            width,
            height,
            near,
            far,
            pose_c2w,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; world `+Z` is up unless the view is vertical.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        fov_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let fwd = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
        if dot(fwd, fwd) < 1e-24 {
            return Err(Error::invalid("look_at: eye and target coincide"));
        }
        let fwd = normalize(fwd);
        let mut up = [0.0, 0.0, 1.0];
        if cross(fwd, up).iter().map(|v| v * v).sum::<f64>() < 1e-12 {
            up = [0.0, 1.0, 0.0];
        }
        let right = normalize(cross(fwd, up));
        let true_up = cross(right, fwd);
        let back = [-fwd[0], -fwd[1], -fwd[2]];
        let pose = [
            right[0], true_up[0], back[0], eye[0], //
            right[1], true_up[1], back[1], eye[1], //
            right[2], true_up[2], back[2], eye[2], //
            0.0, 0.0, 0.0, 1.0,
        ];
        Self::new(fov_deg, width, height, near, far, pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera width and height must be >= 1"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid(format!("fov_deg {} out of (0, 180)", self.fov_deg)));
        }
        if !(self.near > 0.0 && self.near < self.far) || !self.far.is_finite() {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.pose_c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let col_i = [r[0][i], r[1][i], r[2][i]];
                let col_j = [r[0][j], r[1][j], r[2][j]];
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(col_i, col_j) - want).abs() > 1e-5 {
                    return Err(Error::invalid("pose rotation block is not orthonormal"));
                }
            }
        }
        let p = &self.pose_c2w;
        if p[12].abs() > 1e-9 || p[13].abs() > 1e-9 || p[14].abs() > 1e-9 || (p[15] - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("pose bottom row must be [0, 0, 0, 1]"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let p = &self.pose_c2w;
        [[p[0], p[1], p[2]], [p[4], p[5], p[6]], [p[8], p[9], p[10]]]
    }

    pub fn position(&self) -> [f64; 3] {
        [self.pose_c2w[3], self.pose_c2w[7], self.pose_c2w[11]]
    }

    /// World-space viewing direction (camera `-Z`).
    pub fn forward(&self) -> [f64; 3] {
        let r = self.rotation();
        [-r[0][2], -r[1][2], -r[2][2]]
    }

    /// Focal length in pixels from the vertical field of view.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Same pose and intrinsics at a different resolution.
    /// Looks at the origin from `(2.4, -2.4, 1.4)` with a 33.4° field of view.
    pub fn default_view(width: usize, height: usize) -> Result<Self> {
        let eye = [2.4, -2.4, 1.4];
        let r = dot(eye, eye).sqrt();
        Self::look_at(eye, [0.0; 3], 33.40, width, height, r - 1.75, r + 1.75)
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    /// Ray through the centre of pixel `(px, py)`.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let f = self.focal_px();
        let d_cam = [
            (px + 0.5 - 0.5 * self.width as f64) / f,
            -(py + 0.5 - 0.5 * self.height as f64) / f,
            -1.0,
        ];
        let r = self.rotation();
        let d = [
            dot(r[0], d_cam),
            dot(r[1], d_cam),
            dot(r[2], d_cam),
        ];
        Ray {
            origin: self.position(),
            dir: normalize(d),
            near: self.near,
            far: self.far,
        }
    }
}

/// One ray per pixel in row-major order.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            rays.push(camera.ray(px as f64, py as f64));
        }
    }
    Ok(rays)
}

/// Parses 16 comma-separated row-major floats.
pub fn parse_pose(s: &str) -> Result<[f64; 16]> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("malformed pose: {e}")))?;
    vals.try_into()
        .map_err(|v: Vec<f64>| Error::invalid(format!("pose needs 16 values, got {}", v.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_pixel_is_forward() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0; 3], 40.0, 5, 5, 0.1, 10.0).unwrap();
        let rays = generate_rays(&cam).unwrap();
        let r = rays[2 * 5 + 2];
        let f = cam.forward();
        for a in 0..3 {
            assert!((r.dir[a] - f[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_pose_origin() {
        let cam = Camera::new(60.0, 4, 3, 0.5, 2.0, IDENTITY_POSE).unwrap();
        for r in generate_rays(&cam).unwrap() {
            assert_eq!(r.origin, [0.0; 3]);
            assert!((dot(r.dir, r.dir) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_angle_matches_pinhole_geometry() {
        let (w, h) = (8usize, 6usize);
        let cam = Camera::new(90.0, w, h, 0.5, 2.0, IDENTITY_POSE).unwrap();
        let r = generate_rays(&cam).unwrap()[0];
        // tan(45°) = 1, so the image plane at depth 1 spans half-height 1.
        let half_h = 1.0;
        let px_size = 2.0 * half_h / h as f64;
        let x = (0.5 - w as f64 / 2.0) * px_size;
        let y = (h as f64 / 2.0 - 0.5) * px_size;
        let expected = ((x * x + y * y).sqrt()).atan2(1.0);
        let got = (-r.dir[2]).acos();
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_cameras() {
        let mut pose = IDENTITY_POSE;
        pose[0] = 2.0;
        assert!(Camera::new(60.0, 4, 4, 0.5, 2.0, pose).is_err());
        assert!(Camera::new(60.0, 4, 4, 2.0, 1.0, IDENTITY_POSE).is_err());
        assert!(Camera::new(60.0, 0, 4, 0.5, 1.0, IDENTITY_POSE).is_err());
        assert!(Camera::look_at([0.0; 3], [0.0; 3], 60.0, 4, 4, 0.5, 1.0).is_err());
    }

    #[test]
    fn look_at_straight_down_is_valid() {
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], 40.0, 4, 4, 1.0, 5.0).unwrap();
        assert!((cam.forward()[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_parsing() {
        let s = "1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1";
        assert_eq!(parse_pose(s).unwrap(), IDENTITY_POSE);
        assert!(parse_pose("1,2,3").is_err());
        assert!(parse_pose("a,b").is_err());
    }
}
