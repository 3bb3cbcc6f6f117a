//! Planar geometry primitives shared by every other module.
//!
//! Conventions, used consistently across the crate:
//!
//! * Local plane frame: `x` east, `y` north, meters. Heading `psi` is measured
//!   counter-clockwise from the `+x` (east) axis.
//! * Vehicle frame: `x` right, `y` forward, `z` up, origin on the road surface
//!   directly under the LIDAR.
//! * Angles are wrapped to `(-pi, pi]`.
//! * Geographic coordinates convert through a local equirectangular plane
//!   anchored at a [`GeoOrigin`]; over a few kilometers the distortion is far
//!   below sensor noise.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Earth radius used by the equirectangular local plane, meters (WGS-84
/// semi-major axis).
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Wrap an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi); // in [0, 2*pi)
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

/// Rotate a 2-vector counter-clockwise by `angle` radians.
pub fn rotate2(v: Vector2<f64>, angle: f64) -> Vector2<f64> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// A planar pose: position in the local plane plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Heading, CCW from east, radians, wrapped to `(-pi, pi]`.
    pub psi: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi) }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Unit vector pointing forward (along the heading).
    pub fn forward(&self) -> Vector2<f64> {
        Vector2::new(self.psi.cos(), self.psi.sin())
    }

    /// Unit vector pointing to the vehicle's right (forward rotated -90 deg).
    pub fn right(&self) -> Vector2<f64> {
        Vector2::new(self.psi.sin(), -self.psi.cos())
    }

    /// Map a point from the vehicle frame (x right, y forward) to the local
    /// plane.
    pub fn vehicle_to_local(&self, p: Vector2<f64>) -> Vector2<f64> {
        self.position() + p.x * self.right() + p.y * self.forward()
    }

    /// Map a local-plane point into the vehicle frame (x right, y forward).
    pub fn local_to_vehicle(&self, p: Vector2<f64>) -> Vector2<f64> {
        let d = p - self.position();
        Vector2::new(d.dot(&self.right()), d.dot(&self.forward()))
    }
}

/// Anchor of the local equirectangular plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoOrigin {
    /// Convert geographic coordinates to local east/north meters.
    pub fn geo_to_local(&self, lat_deg: f64, lon_deg: f64) -> Vector2<f64> {
        let east = (lon_deg - self.lon_deg).to_radians()
            * self.lat_deg.to_radians().cos()
            * EARTH_RADIUS_M;
        let north = (lat_deg - self.lat_deg).to_radians() * EARTH_RADIUS_M;
        Vector2::new(east, north)
    }

    /// Convert local east/north meters back to geographic coordinates.
    ///
    /// Exact inverse of [`GeoOrigin::geo_to_local`] up to floating point: the
    /// projection is linear in both axes.
    pub fn local_to_geo(&self, p: Vector2<f64>) -> (f64, f64) {
        let lat = self.lat_deg + (p.y / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon_deg
            + (p.x / (EARTH_RADIUS_M * self.lat_deg.to_radians().cos())).to_degrees();
        (lat, lon)
    }
}
