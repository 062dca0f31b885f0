use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Wall order used for absorption coefficients and renderer albedos:
/// x=0, x=Lx, y=0, y=Ly, z=0 (floor), z=Lz (ceiling).
pub const WALLS: usize = 6;

/// Shoebox room spanning `[0, Lx] × [0, Ly] × [0, Lz]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomSpec {
    pub dimensions: Vec3,
    /// One row of six wall coefficients per frequency band; a single row is
    /// broadband.
    pub absorption: Vec<[f64; WALLS]>,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
}

fn default_speed() -> f64 {
    SPEED_OF_SOUND
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            dimensions: [5.0, 4.0, 3.0],
            absorption: vec![[0.25, 0.3, 0.2, 0.35, 0.4, 0.15]],
            speed_of_sound: SPEED_OF_SOUND,
        }
    }
}

impl RoomSpec {
    pub fn shoebox(dimensions: Vec3, absorption: f64) -> Result<Self> {
        let r = Self {
            dimensions,
            absorption: vec![[absorption; WALLS]],
            speed_of_sound: SPEED_OF_SOUND,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "room dimensions must be positive, got {:?}",
                self.dimensions
            )));
        }
        if self.absorption.is_empty() {
            return Err(Error::InvalidArgument("room needs at least one absorption band".into()));
        }
        if self.absorption.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(
                "absorption coefficients must lie in [0, 1]".into(),
            ));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidArgument("speed of sound must be positive".into()));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        norm(self.dimensions)
    }

    pub fn bands(&self) -> usize {
        self.absorption.len()
    }

    /// Strictly inside the box.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.dimensions[i])
    }

    pub fn check_inside(&self, what: &str, p: Vec3) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} {p:?} is not strictly inside the room {:?}",
                self.dimensions
            )))
        }
    }
}

/// Listener / camera pose. `forward` and `up` are orthonormal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
}

impl CameraPose {
    pub fn new(position: Vec3, forward: Vec3, up: Vec3) -> Result<Self> {
        let p = Self {
            position,
            forward,
            up,
        };
        p.validate()?;
        Ok(p)
    }

    /// Yaw about +z measured from +x, pitch positive upward, both in degrees.
    pub fn from_yaw_pitch(position: Vec3, yaw_deg: f64, pitch_deg: f64) -> Self {
        let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let forward = [p.cos() * y.cos(), p.cos() * y.sin(), p.sin()];
        let up = [-p.sin() * y.cos(), -p.sin() * y.sin(), p.cos()];
        Self {
            position,
            forward,
            up,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: Vec3| (norm(v) - 1.0).abs() <= 1e-9;
        if !unit(self.forward) || !unit(self.up) || dot(self.forward, self.up).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "pose orientation must be orthonormal, got forward {:?} up {:?}",
                self.forward, self.up
            )));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pose position must be finite".into()));
        }
        Ok(())
    }

    pub fn right(&self) -> Vec3 {
        cross(self.forward, self.up)
    }

    /// Heading of the forward vector in the horizontal plane, radians.
    pub fn yaw(&self) -> f64 {
        self.forward[1].atan2(self.forward[0])
    }

    /// Ear positions (left, right), `half_width` meters either side.
    pub fn ears(&self, half_width: f64) -> (Vec3, Vec3) {
        let r = self.right();
        (
            sub(self.position, scale(r, half_width)),
            add(self.position, scale(r, half_width)),
        )
    }
}
