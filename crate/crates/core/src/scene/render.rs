use serde::{Deserialize, Serialize};

use super::geometry::{dot, normalize, CameraPose, RoomSpec, Vec3, WALLS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-wall base colour, in wall order (x=0, x=Lx, y=0, y=Ly, floor, ceiling).
const ALBEDO: [[f64; 3]; WALLS] = [
    [0.85, 0.30, 0.25],
    [0.25, 0.70, 0.35],
    [0.30, 0.40, 0.85],
    [0.90, 0.80, 0.30],
    [0.55, 0.40, 0.30],
    [0.92, 0.92, 0.90],
];
const CHECKER_METERS: f64 = 0.5;
const CHECKER_DARK: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 90.0,
        }
    }
}

/// Geometric priors for one view plus the scene point cloud. Image planes
/// are channel-major, row-major within a channel (`[c][row][col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePriors {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl ScenePriors {
    pub fn pixel_normal(&self, row: usize, col: usize) -> Vec3 {
        let plane = self.width * self.height;
        let i = row * self.width + col;
        [self.normal[i], self.normal[plane + i], self.normal[2 * plane + i]]
    }

    pub fn pixel_depth(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// The 7-channel encoder input `rgb, depth / diagonal, normal` as a
    /// `7 × H × W` tensor.
    pub fn visual_input(&self, diagonal: f64) -> Tensor {
        let mut data = Vec::with_capacity(7 * self.width * self.height);
        data.extend_from_slice(&self.rgb);
        data.extend(self.depth.iter().map(|d| d / diagonal));
        data.extend_from_slice(&self.normal);
        Tensor::new(vec![7, self.height, self.width], data).expect("prior planes are consistent")
    }

    /// Points scaled by `1 / diagonal` as an `N × 3` tensor.
    pub fn point_input(&self, diagonal: f64) -> Result<Tensor> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("point set is empty".into()));
        }
        let data = self.points.iter().flat_map(|p| p.map(|v| v / diagonal)).collect();
        Tensor::new(vec![self.points.len(), 3], data)
    }
}

/// View ray through the centre of pixel (`row`, `col`).
pub fn pixel_ray(pose: &CameraPose, cfg: &RenderConfig, row: usize, col: usize) -> Vec3 {
    let tan = (cfg.fov_deg.to_radians() / 2.0).tan();
    let aspect = cfg.height as f64 / cfg.width as f64;
    let sx = (2.0 * (col as f64 + 0.5) / cfg.width as f64 - 1.0) * tan;
    let sy = (1.0 - 2.0 * (row as f64 + 0.5) / cfg.height as f64) * tan * aspect;
    let r = pose.right();
    normalize([
        pose.forward[0] + sx * r[0] + sy * pose.up[0],
        pose.forward[1] + sx * r[1] + sy * pose.up[1],
        pose.forward[2] + sx * r[2] + sy * pose.up[2],
    ])
}

/// First wall hit by a ray from an interior point: (distance, wall index).
pub fn intersect(room: &RoomSpec, origin: Vec3, dir: Vec3) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for axis in 0..3 {
        let d = dir[axis];
        if d == 0.0 {
            continue;
        }
        let (bound, wall) = if d > 0.0 {
            (room.dimensions[axis], 2 * axis + 1)
        } else {
            (0.0, 2 * axis)
        };
        let t = (bound - origin[axis]) / d;
        if t < best.0 {
            best = (t, wall);
        }
    }
    best
}

/// Unit normal of a wall pointing into the room.
pub fn inward_normal(wall: usize) -> Vec3 {
    let mut n = [0.0; 3];
    n[wall / 2] = if wall % 2 == 0 { 1.0 } else { -1.0 };
    n
}

/// Checkerboard albedo at a surface point.
pub fn surface_color(wall: usize, p: Vec3) -> [f64; 3] {
    let axis = wall / 2;
    let (u, v) = match axis {
        0 => (p[1], p[2]),
        1 => (p[0], p[2]),
        _ => (p[0], p[1]),
    };
    let cell = (u / CHECKER_METERS).floor() as i64 + (v / CHECKER_METERS).floor() as i64;
    let shade = if cell.rem_euclid(2) == 0 { 1.0 } else { CHECKER_DARK };
    ALBEDO[wall].map(|c| c * shade)
}

/// Renders rgb, depth and normal planes for `pose`; `points` are attached
/// unchanged.
pub fn render_priors(
    room: &RoomSpec,
    pose: &CameraPose,
    cfg: &RenderConfig,
    points: Vec<Vec3>,
) -> Result<ScenePriors> {
    room.validate()?;
    pose.validate()?;
    room.check_inside("camera", pose.position)?;
    if cfg.width == 0 || cfg.height == 0 || !(cfg.fov_deg > 0.0 && cfg.fov_deg < 180.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid render config {}x{} fov {}",
            cfg.width, cfg.height, cfg.fov_deg
        )));
    }
    let plane = cfg.width * cfg.height;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut normal = vec![0.0; 3 * plane];
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let dir = pixel_ray(pose, cfg, row, col);
            let (t, wall) = intersect(room, pose.position, dir);
            let hit = [
                pose.position[0] + t * dir[0],
                pose.position[1] + t * dir[1],
                pose.position[2] + t * dir[2],
            ];
            let i = row * cfg.width + col;
            depth[i] = t;
            let n = inward_normal(wall);
            debug_assert!(dot(n, dir) < 0.0);
            let c = surface_color(wall, hit);
            for ch in 0..3 {
                rgb[ch * plane + i] = c[ch];
                normal[ch * plane + i] = n[ch];
            }
        }
    }
    Ok(ScenePriors {
        width: cfg.width,
        height: cfg.height,
        rgb,
        depth,
        normal,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn odd_cfg() -> RenderConfig {
        RenderConfig {
            width: 9,
            height: 7,
            fov_deg: 60.0,
        }
    }

    #[test]
    fn center_pixel_sees_facing_wall() {
        let room = RoomSpec::shoebox([4.0, 3.0, 2.5], 0.2).unwrap();
        let pose = CameraPose::from_yaw_pitch([1.5, 1.5, 1.25], 0.0, 0.0);
        let p = render_priors(&room, &pose, &odd_cfg(), vec![]).unwrap();
        assert!((p.pixel_depth(3, 4) - 2.5).abs() < 1e-12);
        assert_eq!(p.pixel_normal(3, 4), [-1.0, 0.0, 0.0]);

        let back = CameraPose::from_yaw_pitch([1.5, 1.5, 1.25], 180.0, 0.0);
        let q = render_priors(&room, &back, &odd_cfg(), vec![]).unwrap();
        assert!((q.pixel_depth(3, 4) - 1.5).abs() < 1e-12);
        assert_eq!(q.pixel_normal(3, 4), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn outside_camera_rejected() {
        let room = RoomSpec::shoebox([2.0, 2.0, 2.0], 0.2).unwrap();
        let pose = CameraPose::from_yaw_pitch([3.0, 1.0, 1.0], 0.0, 0.0);
        assert!(render_priors(&room, &pose, &odd_cfg(), vec![]).is_err());
    }

    #[test]
    fn colors_in_unit_range_and_walls_distinct() {
        for (w, a) in ALBEDO.iter().enumerate() {
            assert!(a.iter().all(|c| (0.0..=1.0).contains(c)));
            for b in &ALBEDO[w + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
