//! Tunnel geometry, facility placement, and the two matcher maps.
//!
//! The tunnel cross-section is the upper half of an ellipse sitting on the
//! road surface: a point at lateral offset `x` from the centerline and height
//! `z` above the road lies on the wall when `x^2/a^2 + z^2/b^2 = 1`, `z >= 0`.
//! The centerline is either straight or a constant-curvature arc in the local
//! plane; a station coordinate `s` (arc length from the entry portal) and a
//! signed lateral offset `u` (positive to the right of the driving direction)
//! parameterize every tunnel-fixed position.
//!
//! Safety facilities are placed by interval rules along the wall and ceiling.
//! Four kinds are usable as point landmarks (fire-extinguisher lamps,
//! emergency-exit lights, lane-control signals, exit signs); jet fans and
//! tunnel lights are simulated purely as clutter and never enter the maps.

use crate::geom::{wrap_angle, Pose2D};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tunnel geometry and lane layout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TunnelSpec {
    /// Ellipse semi-axis along the lateral direction, meters.
    pub a: f64,
    /// Ellipse semi-axis along the vertical direction, meters.
    pub b: f64,
    pub lane_count: u32,
    pub lane_width: f64,
    /// Arc length between the portals, meters.
    pub length: f64,
    /// Pose of the centerline at the entry portal (s = 0).
    pub entry: Pose2D,
    /// Signed centerline curvature, 1/m. Zero means straight; positive bends
    /// left.
    pub curvature: f64,
}

impl Default for TunnelSpec {
    fn default() -> Self {
        Self {
            a: 7.0,
            b: 6.8,
            lane_count: 3,
            lane_width: 3.6,
            length: 1500.0,
            entry: Pose2D::new(0.0, 0.0, 0.0),
            curvature: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("tunnel cross-section too narrow: a = {a} must exceed half the lane span {half_span} plus clearance")]
    TooNarrow { a: f64, half_span: f64 },
    #[error("tunnel crown too low: b = {b} must exceed 4.5 m for ceiling facilities")]
    TooLow { b: f64 },
    #[error("invalid lane layout: {0}")]
    BadLanes(String),
    #[error("curvature {kappa} out of range: |kappa| must be <= {max}")]
    BadCurvature { kappa: f64, max: f64 },
    #[error("facility does not fit the cross-section: {0}")]
    FacilityDoesNotFit(String),
}

impl TunnelSpec {
    /// Half the total lane span, meters: lanes are centered on the tunnel
    /// centerline.
    pub fn half_span(&self) -> f64 {
        0.5 * self.lane_count as f64 * self.lane_width
    }

    /// Lateral offset of a lane center. Lanes are numbered 1 (leftmost in the
    /// driving direction) through `lane_count`; offsets are negative on the
    /// left.
    pub fn lane_center_offset(&self, lane: u32) -> f64 {
        -self.half_span() + (lane as f64 - 0.5) * self.lane_width
    }

    /// Lateral offsets of the painted lane lines (lane_count + 1 of them).
    pub fn lane_line_offsets(&self) -> Vec<f64> {
        (0..=self.lane_count)
            .map(|j| -self.half_span() + j as f64 * self.lane_width)
            .collect()
    }

    /// Lateral position of the wall at height `z`, meters (positive; the wall
    /// sits at `+-wall_x_at(z)`). `None` above the crown.
    pub fn wall_x_at(&self, z: f64) -> Option<f64> {
        if !(0.0..=self.b).contains(&z) {
            return None;
        }
        Some(self.a * (1.0 - (z / self.b).powi(2)).sqrt())
    }

    /// Centerline pose at station `s` (meters from the entry portal; negative
    /// values extend onto the approach road).
    pub fn pose_at(&self, s: f64) -> Pose2D {
        let p0 = self.entry.position();
        let psi0 = self.entry.psi;
        if self.curvature == 0.0 {
            let p = p0 + s * self.entry.forward();
            return Pose2D::new(p.x, p.y, psi0);
        }
        let k = self.curvature;
        let psi = psi0 + k * s;
        // Arc center sits 1/k to the left of the entry pose.
        let left0 = Vector2::new(-psi0.sin(), psi0.cos());
        let center = p0 + left0 / k;
        let left = Vector2::new(-psi.sin(), psi.cos());
        let p = center - left / k;
        Pose2D::new(p.x, p.y, psi)
    }

    /// Local-plane position of tunnel coordinates (station, rightward lateral
    /// offset).
    pub fn local_of(&self, s: f64, u: f64) -> Vector2<f64> {
        let pose = self.pose_at(s);
        pose.position() + u * pose.right()
    }

    /// Inverse of [`TunnelSpec::local_of`]: station and signed lateral offset
    /// of a local-plane point.
    pub fn station_of(&self, p: Vector2<f64>) -> (f64, f64) {
        let p0 = self.entry.position();
        let psi0 = self.entry.psi;
        if self.curvature == 0.0 {
            let d = p - p0;
            return (d.dot(&self.entry.forward()), d.dot(&self.entry.right()));
        }
        let k = self.curvature;
        let left0 = Vector2::new(-psi0.sin(), psi0.cos());
        let center = p0 + left0 / k;
        let w = p - center;
        let u = k.signum() * w.norm() - 1.0 / k;
        let theta = w.y.atan2(w.x);
        let psi = theta + k.signum() * std::f64::consts::FRAC_PI_2;
        let s = wrap_angle(psi - psi0) / k;
        (s, u)
    }

    /// Structural validation; called by scenario loading and map generation.
    pub fn validate(&self) -> Result<(), TunnelError> {
        if self.lane_count == 0 || self.lane_count > 6 {
            return Err(TunnelError::BadLanes(format!(
                "lane_count {} outside 1..=6",
                self.lane_count
            )));
        }
        if !(2.5..=5.0).contains(&self.lane_width) {
            return Err(TunnelError::BadLanes(format!(
                "lane_width {} outside 2.5..=5.0 m",
                self.lane_width
            )));
        }
        if self.a < self.half_span() + 0.5 {
            return Err(TunnelError::TooNarrow { a: self.a, half_span: self.half_span() });
        }
        if self.b <= 4.5 {
            return Err(TunnelError::TooLow { b: self.b });
        }
        let max_kappa = 2e-3;
        if self.curvature.abs() > max_kappa {
            return Err(TunnelError::BadCurvature { kappa: self.curvature, max: max_kappa });
        }
        if !(self.length > 0.0) || self.length > 20_000.0 {
            return Err(TunnelError::BadLanes(format!("length {} outside (0, 20000]", self.length)));
        }
        Ok(())
    }
}

/// Facility kinds present in the simulated tunnel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FacilityKind {
    Lamp,
    ExitLight,
    Lcs,
    ExitSign,
    JetFan,
    TunnelLight,
}

impl FacilityKind {
    /// Whether this kind enters the point-landmark map. Jet fans and tunnel
    /// lights are clutter: mounted too high and too irregular to be useful.
    pub fn is_landmark(self) -> bool {
        matches!(self, Self::Lamp | Self::ExitLight | Self::Lcs | Self::ExitSign)
    }

    /// Stable name used in map files and reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::Lamp => "lamp",
            Self::ExitLight => "exit_light",
            Self::Lcs => "lcs",
            Self::ExitSign => "exit_sign",
            Self::JetFan => "jet_fan",
            Self::TunnelLight => "tunnel_light",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "lamp" => Self::Lamp,
            "exit_light" => Self::ExitLight,
            "lcs" => Self::Lcs,
            "exit_sign" => Self::ExitSign,
            "jet_fan" => Self::JetFan,
            "tunnel_light" => Self::TunnelLight,
            _ => return None,
        })
    }

    /// The four landmark kinds, in report order.
    pub const LANDMARKS: [FacilityKind; 4] =
        [Self::Lamp, Self::ExitLight, Self::Lcs, Self::ExitSign];
}

/// How a facility attaches to the tunnel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Mount {
    /// Mounted on the right wall, protruding inward. `gap` is the standoff
    /// between wall surface and the back of the box, meters.
    WallRight { gap: f64 },
    /// Mounted on the left wall.
    WallLeft { gap: f64 },
    /// Suspended from the ceiling above each lane center (one box per lane).
    CeilingLaneCenters,
    /// Suspended from the ceiling at a fixed lateral offset.
    CeilingAt { u: f64 },
}

/// Placement rule for one facility kind: regulated interval plus box size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FacilityRule {
    pub kind: FacilityKind,
    /// Station interval between installations, meters.
    pub interval: f64,
    /// Station of the first installation, meters from the entry portal.
    pub first: f64,
    /// Center height of the box above the road, meters.
    pub height: f64,
    /// Box dimensions as seen by approaching traffic: width (across the
    /// driving direction), depth (along it for ceiling mounts, protrusion for
    /// wall mounts), height. Meters.
    pub size: [f64; 3],
    pub mount: Mount,
}

impl FacilityRule {
    /// Full box extents along the tunnel axes (lateral, station, vertical).
    /// Wall mounts face traffic with their width along the wall; ceiling
    /// mounts face it head-on. Placement and detection size checks share
    /// this mapping.
    pub fn extents(&self) -> [f64; 3] {
        let [w, l, h] = self.size;
        match self.mount {
            Mount::WallRight { .. } | Mount::WallLeft { .. } => [l, w, h],
            Mount::CeilingLaneCenters | Mount::CeilingAt { .. } => [w, l, h],
        }
    }
}

/// Default placement rules for a Korean expressway tunnel.
pub fn default_rules() -> Vec<FacilityRule> {
    vec![
        FacilityRule {
            kind: FacilityKind::Lamp,
            interval: 50.0,
            first: 50.0,
            height: 2.75,
            size: [0.2, 0.22, 0.42],
            mount: Mount::WallRight { gap: 0.0 },
        },
        FacilityRule {
            kind: FacilityKind::ExitLight,
            interval: 50.0,
            first: 25.0,
            height: 1.75,
            size: [1.2, 0.03, 0.73],
            // The thin panel hangs on a shallow bracket, leaving its face
            // inside the wall-removal margin at the mount height: only the
            // bottom rows, where the wall bows away from the flat panel, and
            // installations on inward-bowing sections stand clear of it,
            // which is exactly why its detection is opportunistic.
            mount: Mount::WallLeft { gap: 0.04 },
        },
        FacilityRule {
            kind: FacilityKind::Lcs,
            interval: 500.0,
            first: 100.0,
            height: 5.25,
            size: [0.8, 0.25, 0.8],
            mount: Mount::CeilingLaneCenters,
        },
        FacilityRule {
            kind: FacilityKind::ExitSign,
            interval: 250.0,
            first: 250.0,
            // Low end of the regulated 5.0..5.5 m band: the sign hangs close
            // to the corridor-side wall, where the elliptical ceiling is low.
            height: 5.0,
            size: [1.31, 0.13, 0.61],
            mount: Mount::CeilingAt { u: -4.3 },
        },
        FacilityRule {
            kind: FacilityKind::JetFan,
            interval: 175.0,
            first: 175.0,
            height: 5.5,
            size: [1.2, 4.9, 1.2],
            mount: Mount::CeilingAt { u: -2.0 },
        },
        FacilityRule {
            kind: FacilityKind::JetFan,
            interval: 175.0,
            first: 175.0,
            height: 5.5,
            size: [1.2, 4.9, 1.2],
            mount: Mount::CeilingAt { u: 2.0 },
        },
        FacilityRule {
            kind: FacilityKind::TunnelLight,
            interval: 7.5,
            first: 7.5,
            height: 6.25,
            size: [1.4, 0.4, 0.15],
            mount: Mount::CeilingAt { u: 0.0 },
        },
    ]
}

/// An axis-aligned box in tunnel coordinates: half-extents along the lateral
/// (`u`), station (`s`), and vertical (`z`) directions at its station's
/// tangent frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FacilityBox {
    pub kind: FacilityKind,
    pub s: f64,
    pub u: f64,
    pub z: f64,
    pub half: [f64; 3],
}

impl FacilityBox {
    pub fn center_local(&self, spec: &TunnelSpec) -> Vector2<f64> {
        spec.local_of(self.s, self.u)
    }
}

/// Seeded harmonic wall texture: a smooth deviation field over (station,
/// cross-section angle), bounded by `amp`. Scan rays and facility brackets
/// both read it, so fixtures sit on the as-built wall, not the ideal shell.
#[derive(Debug, Clone)]
pub struct Roughness {
    amp: f64,
    // (spatial frequency 2*pi/lambda, station phase, angular order, angular phase)
    terms: [(f64, f64, f64, f64); 3],
}

impl Roughness {
    pub fn new(amp: f64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let tau = std::f64::consts::TAU;
        let mut term = |lambda: f64, order: f64| {
            (tau / lambda, rng.random_range(0.0..tau), order, rng.random_range(0.0..tau))
        };
        Self { amp, terms: [term(23.7, 1.0), term(7.3, 2.0), term(2.9, 3.0)] }
    }

    /// Signed inward wall deviation at station `s`, cross-section angle
    /// `theta` (atan2 of height over lateral offset).
    pub fn value(&self, s: f64, theta: f64) -> f64 {
        let [t1, t2, t3] = self.terms;
        self.amp
            * (0.625 * (t1.0 * s + t1.1).sin() * (t1.2 * theta + t1.3).cos()
                + 0.25 * (t2.0 * s + t2.1).sin() * (t2.2 * theta + t2.3).cos()
                + 0.125 * (t3.0 * s + t3.1).sin() * (t3.2 * theta + t3.3).cos())
    }
}

/// Place every facility box along the tunnel. Stations jitter by up to
/// +-0.5 m (seeded) around the regulated interval, like real installations.
/// Wall brackets follow the as-built wall surface, so how far a fixture's
/// face stands clear of the ideal shell varies per installation.
pub fn place_facilities(
    spec: &TunnelSpec,
    rules: &[FacilityRule],
    seed: u64,
    roughness: &Roughness,
) -> Result<Vec<FacilityBox>, TunnelError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x70a1_e517_e5u64);
    let mut boxes = Vec::new();
    for rule in rules {
        let ext = rule.extents();
        let half = [0.5 * ext[0], 0.5 * ext[1], 0.5 * ext[2]];
        let mut s = rule.first;
        while s <= spec.length + 1e-9 {
            let sj = (s + rng.random_range(-0.5..0.5)).clamp(0.5, spec.length);
            match rule.mount {
                Mount::WallRight { gap } | Mount::WallLeft { gap } => {
                    let wall = spec.wall_x_at(rule.height).ok_or_else(|| {
                        TunnelError::FacilityDoesNotFit(format!(
                            "{} height {} above crown",
                            rule.kind.name(),
                            rule.height
                        ))
                    })?;
                    let side = if matches!(rule.mount, Mount::WallRight { .. }) { 1.0 } else { -1.0 };
                    // Where the horizontal slice at the mount height meets the
                    // as-built wall: offsetting a surface inward by `dev`
                    // along its normal moves that slice by dev / n_u, with
                    // n_u the lateral component of the unit outward normal.
                    let theta = rule.height.atan2(side * wall);
                    let dev = roughness.value(sj, theta);
                    let n_u = Vector2::new(wall / (spec.a * spec.a), rule.height / (spec.b * spec.b))
                        .normalize()
                        .x;
                    // Wall mounts protrude inward by their lateral extent.
                    let u_abs = wall - dev / n_u - gap - half[0];
                    let u = side * u_abs;
                    boxes.push(FacilityBox { kind: rule.kind, s: sj, u, z: rule.height, half });
                }
                Mount::CeilingLaneCenters => {
                    for lane in 1..=spec.lane_count {
                        let u = spec.lane_center_offset(lane);
                        check_ceiling_fit(spec, rule, u)?;
                        boxes.push(FacilityBox { kind: rule.kind, s: sj, u, z: rule.height, half });
                    }
                }
                Mount::CeilingAt { u } => {
                    check_ceiling_fit(spec, rule, u)?;
                    boxes.push(FacilityBox { kind: rule.kind, s: sj, u, z: rule.height, half });
                }
            }
            s += rule.interval;
        }
    }
    Ok(boxes)
}

fn check_ceiling_fit(spec: &TunnelSpec, rule: &FacilityRule, u: f64) -> Result<(), TunnelError> {
    // Clearance is checked at the box centerline: a flat panel under a curved
    // ceiling may let an outer top corner graze the ideal ellipse, which is
    // harmless (such points are cut by wall removal anyway).
    let top = rule.height + 0.5 * rule.size[2];
    let ceiling = if u.abs() >= spec.a {
        0.0
    } else {
        spec.b * (1.0 - (u / spec.a).powi(2)).sqrt()
    };
    if top > ceiling - 0.02 {
        return Err(TunnelError::FacilityDoesNotFit(format!(
            "{} at u = {:.2}: box top {:.2} m vs ceiling {:.2} m",
            rule.kind.name(),
            u,
            top,
            ceiling
        )));
    }
    Ok(())
}

/// A surveyed facility center: one row of the point-landmark map.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub kind: FacilityKind,
    /// Center position in the local plane, meters.
    pub pos: Vector2<f64>,
    /// Center height above the road, meters (kept for diagnostics; matching
    /// is planar).
    pub height: f64,
}

/// Point-landmark map: exact centers of the four usable facility kinds.
#[derive(Debug, Clone, Default)]
pub struct LandmarkMap {
    pub landmarks: Vec<Landmark>,
}

impl LandmarkMap {
    pub fn count_of(&self, kind: FacilityKind) -> usize {
        self.landmarks.iter().filter(|l| l.kind == kind).count()
    }
}

/// One lane-marking segment as a 2D Gaussian: mean on the painted line,
/// covariance elongated along it.
#[derive(Debug, Clone, Copy)]
pub struct LaneGaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

/// Lane-marking probability-distribution map.
#[derive(Debug, Clone, Default)]
pub struct LaneDistMap {
    pub gaussians: Vec<LaneGaussian>,
    pub segment_len: f64,
}

/// Half-width of the painted lane line, meters; also the fixed minor standard
/// deviation of every lane Gaussian.
pub const LANE_PAINT_HALF_WIDTH: f64 = 0.075;

/// Build both matcher maps from the tunnel spec and placed facilities.
///
/// Lane lines are cut into `segment_len` pieces; each piece's Gaussian is the
/// scatter of points sampled along it, with the minor eigenvalue pinned to the
/// paint half-width so the distribution never collapses.
pub fn build_maps(
    spec: &TunnelSpec,
    boxes: &[FacilityBox],
    segment_len: f64,
) -> (LandmarkMap, LaneDistMap) {
    let landmarks = boxes
        .iter()
        .filter(|b| b.kind.is_landmark())
        .map(|b| {
            // Landmarks are stored where the sensor actually sees them: the
            // face turned toward traffic, not the body center. Wall mounts
            // hide their center inside the wall-removal shell; ceiling panels
            // present their upstream face, half a body depth before center.
            let (s_obs, u_obs) = match b.kind {
                FacilityKind::Lamp | FacilityKind::ExitLight => {
                    (b.s, b.u - b.u.signum() * b.half[0])
                }
                _ => (b.s - b.half[1], b.u),
            };
            Landmark { kind: b.kind, pos: spec.local_of(s_obs, u_obs), height: b.z }
        })
        .collect();

    let mut gaussians = Vec::new();
    for u in spec.lane_line_offsets() {
        let mut s0 = 0.0;
        while s0 < spec.length - 1e-9 {
            let s1 = (s0 + segment_len).min(spec.length);
            gaussians.push(segment_gaussian(spec, u, s0, s1));
            s0 = s1;
        }
    }
    (LandmarkMap { landmarks }, LaneDistMap { gaussians, segment_len })
}

fn segment_gaussian(spec: &TunnelSpec, u: f64, s0: f64, s1: f64) -> LaneGaussian {
    // Sample the painted line densely across the segment.
    let step = 0.25;
    let n = (((s1 - s0) / step).ceil() as usize).max(2);
    let pts: Vec<Vector2<f64>> = (0..n)
        .map(|i| {
            let s = s0 + (i as f64 + 0.5) * (s1 - s0) / n as f64;
            spec.local_of(s, u)
        })
        .collect();
    let mean = pts.iter().sum::<Vector2<f64>>() / n as f64;
    let mut scatter = Matrix2::zeros();
    for p in &pts {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    scatter /= n as f64;
    // Pin the minor eigenvalue to the paint half-width.
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let (i_maj, i_min) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let v_maj = eig.eigenvectors.column(i_maj).into_owned();
    let v_min = eig.eigenvectors.column(i_min).into_owned();
    let lam_maj = eig.eigenvalues[i_maj].max(LANE_PAINT_HALF_WIDTH.powi(2));
    let lam_min = LANE_PAINT_HALF_WIDTH.powi(2);
    let cov = lam_maj * v_maj * v_maj.transpose() + lam_min * v_min * v_min.transpose();
    LaneGaussian { mean, cov }
}

/// Cross-section ring of the virtual elliptical cylinder: wall arc points at
/// `angular_res_deg` spacing (swept through the full quadrant on both sides)
/// plus floor points at 0.5 m spacing. Returns `(x, z)` pairs.
pub fn ellipse_ring(a: f64, b: f64, angular_res_deg: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    let n = (90.0 / angular_res_deg).round() as usize;
    for i in 0..=n {
        let theta = (i as f64 * angular_res_deg).to_radians();
        // x = a*b / sqrt(b^2 + a^2 tan^2 theta), with the apex handled exactly.
        let x = if i == n {
            0.0
        } else {
            let t = theta.tan();
            a * b / (b * b + a * a * t * t).sqrt()
        };
        let z = b * (1.0 - (x / a).powi(2)).max(0.0).sqrt();
        pts.push((x, z));
        if x > 0.0 {
            pts.push((-x, z));
        }
    }
    // Floor closes the section at z = 0.
    let step = 0.5;
    let mut x = -a + step;
    while x < a - step + 1e-9 {
        pts.push((x, 0.0));
        x += step;
    }
    pts
}

/// The virtual elliptical cylinder used as the ICP alignment target: rings
/// stacked along the longitudinal axis. Points are `(lateral, longitudinal,
/// up)` in the tunnel-centered frame.
pub fn virtual_cylinder(a: f64, b: f64, span: f64, spacing: f64, angular_res_deg: f64) -> Vec<Vector3<f64>> {
    let ring = ellipse_ring(a, b, angular_res_deg);
    let n_rings = (span / spacing).floor() as i64 + 1;
    let mut pts = Vec::with_capacity(ring.len() * n_rings as usize);
    let mut i = 0;
    while i < n_rings {
        let y = -0.5 * span + i as f64 * spacing;
        for &(x, z) in &ring {
            pts.push(Vector3::new(x, y, z));
        }
        i += 1;
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec_1500() -> TunnelSpec {
        TunnelSpec::default()
    }

    fn rough(seed: u64) -> Roughness {
        Roughness::new(0.04, seed)
    }

    #[test]
    fn default_spec_validates() {
        spec_1500().validate().unwrap();
    }

    #[test]
    fn lane_centers_and_lines() {
        let spec = spec_1500();
        assert_relative_eq!(spec.lane_center_offset(1), -3.6);
        assert_relative_eq!(spec.lane_center_offset(2), 0.0);
        assert_relative_eq!(spec.lane_center_offset(3), 3.6);
        assert_eq!(spec.lane_line_offsets().len(), 4);
        assert_relative_eq!(spec.lane_line_offsets()[0], -5.4);
        assert_relative_eq!(spec.lane_line_offsets()[3], 5.4);
    }

    #[test]
    fn facility_counts_for_default_tunnel() {
        // Oracle: floor(length / interval) for rules anchored at one interval,
        // 1 + floor((length - first)/interval) in general; LCS rows carry one
        // box per lane.
        let spec = spec_1500();
        let boxes = place_facilities(&spec, &default_rules(), 1, &rough(1)).unwrap();
        let count = |k: FacilityKind| boxes.iter().filter(|b| b.kind == k).count();
        assert_eq!(count(FacilityKind::Lamp), 30); // 50, 100, ..., 1500
        assert_eq!(count(FacilityKind::ExitLight), 30); // 25, 75, ..., 1475
        assert_eq!(count(FacilityKind::Lcs), 3 * 3); // rows at 100, 600, 1100
        assert_eq!(count(FacilityKind::ExitSign), 6); // 250, ..., 1500
        assert_eq!(count(FacilityKind::JetFan), 2 * 8); // pairs at 175, ..., 1400
        assert_eq!(count(FacilityKind::TunnelLight), 200); // 7.5, ..., 1500
    }

    #[test]
    fn facility_jitter_is_bounded_and_seeded() {
        let spec = spec_1500();
        let a = place_facilities(&spec, &default_rules(), 7, &rough(7)).unwrap();
        let b = place_facilities(&spec, &default_rules(), 7, &rough(7)).unwrap();
        let c = place_facilities(&spec, &default_rules(), 8, &rough(8)).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.s == y.s));
        assert!(a.iter().zip(&c).any(|(x, y)| x.s != y.s));
        // Lamps stay within 0.5 m of the regulated station.
        for (i, lamp) in a.iter().filter(|b| b.kind == FacilityKind::Lamp).enumerate() {
            let nominal = 50.0 * (i as f64 + 1.0);
            assert!((lamp.s - nominal).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn wall_mounts_follow_the_as_built_wall() {
        // Bracket depth is fixed, so a fixture's clearance from the *ideal*
        // shell must vary with the local wall deviation: gap + dev / n_u,
        // within the texture amplitude, and actually spreading across
        // installations rather than repeating one value.
        let spec = spec_1500();
        let roughness = rough(3);
        let boxes = place_facilities(&spec, &default_rules(), 3, &roughness).unwrap();
        let wall = spec.wall_x_at(1.75).unwrap();
        let clearances: Vec<f64> = boxes
            .iter()
            .filter(|b| b.kind == FacilityKind::ExitLight)
            .map(|b| wall - (b.u.abs() + b.half[0]))
            .collect();
        assert_eq!(clearances.len(), 30);
        let lo = clearances.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = clearances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &c in &clearances {
            // Slice offset dev / n_u stays within amp / n_u of the bracket gap.
            assert!((c - 0.04).abs() <= 0.04 / 0.9 + 1e-9, "clearance {c} outside texture bound");
        }
        assert!(hi - lo > 0.02, "clearances did not spread with the wall texture: {lo}..{hi}");
        // An inward wall bulge must push the fixture inward (larger clearance).
        let bulged = boxes
            .iter()
            .filter(|b| b.kind == FacilityKind::ExitLight)
            .max_by(|x, y| {
                let t = |b: &FacilityBox| roughness.value(b.s, b.z.atan2(-wall));
                t(x).total_cmp(&t(y))
            })
            .unwrap();
        let c_bulged = wall - (bulged.u.abs() + bulged.half[0]);
        assert!(c_bulged > 0.055, "inward bulge should raise clearance, got {c_bulged}");
    }

    #[test]
    fn landmark_map_holds_only_usable_kinds() {
        let spec = spec_1500();
        let boxes = place_facilities(&spec, &default_rules(), 1, &rough(1)).unwrap();
        let (lm, _) = build_maps(&spec, &boxes, 5.0);
        assert_eq!(lm.landmarks.len(), 30 + 30 + 9 + 6);
        assert!(lm.landmarks.iter().all(|l| l.kind.is_landmark()));
    }

    #[test]
    fn lane_map_segment_count_and_eigenvalues() {
        let spec = spec_1500();
        let boxes = place_facilities(&spec, &default_rules(), 1, &rough(1)).unwrap();
        let (_, lanes) = build_maps(&spec, &boxes, 5.0);
        // 4 lines x 1500 m / 5 m.
        assert_eq!(lanes.gaussians.len(), 4 * 300);
        for g in &lanes.gaussians {
            let eig = nalgebra::SymmetricEigen::new(g.cov);
            let lo = eig.eigenvalues.min();
            let hi = eig.eigenvalues.max();
            assert!(lo >= 1e-4, "minor eigenvalue {lo} below floor");
            assert!(hi <= 25.0, "major eigenvalue {hi} above cap");
            // Major axis of a straight-tunnel segment must be parallel to the
            // line, i.e. the driving direction (east here).
            let i_maj = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
            let v = eig.eigenvectors.column(i_maj);
            assert!(v.x.abs() > 1.0 - 1e-6, "major axis not along the line: {v:?}");
        }
    }

    #[test]
    fn lane_gaussian_major_variance_matches_uniform_segment() {
        // A 5 m straight segment sampled uniformly has variance ~ L^2/12.
        let spec = spec_1500();
        let g = segment_gaussian(&spec, 0.0, 0.0, 5.0);
        let eig = nalgebra::SymmetricEigen::new(g.cov);
        let hi = eig.eigenvalues.max();
        assert_relative_eq!(hi, 25.0 / 12.0, max_relative = 0.02);
    }

    #[test]
    fn ellipse_ring_points_satisfy_the_ellipse() {
        let ring = ellipse_ring(7.0, 6.8, 5.0);
        // 19 quadrant angles -> 37 arc points (apex deduplicated), plus 27
        // floor points on the 0.5 m grid strictly inside the walls.
        assert_eq!(ring.len(), 37 + 27);
        for &(x, z) in ring.iter().take(37) {
            let e = (x / 7.0).powi(2) + (z / 6.8).powi(2);
            assert_relative_eq!(e, 1.0, epsilon = 1e-9);
            assert!(z >= 0.0);
        }
        for &(_, z) in ring.iter().skip(37) {
            assert_eq!(z, 0.0);
        }
    }

    #[test]
    fn virtual_cylinder_is_rings_times_span() {
        let ring_len = ellipse_ring(7.0, 6.8, 5.0).len();
        let cyl = virtual_cylinder(7.0, 6.8, 40.0, 2.0, 5.0);
        assert_eq!(cyl.len(), 21 * ring_len);
        let y_min = cyl.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let y_max = cyl.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(y_min, -20.0);
        assert_relative_eq!(y_max, 20.0);
    }

    #[test]
    fn straight_station_round_trip() {
        let spec = spec_1500();
        let p = spec.local_of(123.0, -3.6);
        let (s, u) = spec.station_of(p);
        assert_relative_eq!(s, 123.0, epsilon = 1e-9);
        assert_relative_eq!(u, -3.6, epsilon = 1e-9);
    }

    #[test]
    fn ceiling_facility_must_fit_under_the_crown() {
        let spec = spec_1500();
        let rule = FacilityRule {
            kind: FacilityKind::ExitSign,
            interval: 250.0,
            first: 250.0,
            height: 5.25,
            size: [1.31, 0.13, 0.61],
            mount: Mount::CeilingAt { u: -5.2 }, // ceiling is only ~3.5 m there
        };
        assert!(place_facilities(&spec, &[rule], 1, &rough(1)).is_err());
    }

    proptest! {
        #[test]
        fn curved_station_round_trip(
            s in -100.0f64..1600.0,
            u in -6.9f64..6.9,
            kappa in prop::sample::select(vec![-8e-4, -3e-4, 2e-4, 8e-4]),
            psi0 in -3.0f64..3.0,
        ) {
            let spec = TunnelSpec {
                curvature: kappa,
                entry: Pose2D::new(50.0, -20.0, psi0),
                ..TunnelSpec::default()
            };
            let p = spec.local_of(s, u);
            let (s2, u2) = spec.station_of(p);
            prop_assert!((s2 - s).abs() < 1e-6, "s {} vs {}", s2, s);
            prop_assert!((u2 - u).abs() < 1e-9, "u {} vs {}", u2, u);
        }

        #[test]
        fn pose_at_heading_matches_curvature(
            s in 0.0f64..1500.0,
            kappa in prop::sample::select(vec![0.0, -5e-4, 5e-4]),
        ) {
            let spec = TunnelSpec { curvature: kappa, ..TunnelSpec::default() };
            let pose = spec.pose_at(s);
            prop_assert!((wrap_angle(pose.psi - (spec.entry.psi + kappa * s))).abs() < 1e-12);
            // Finite-difference tangent agrees with the heading.
            let d = (spec.pose_at(s + 0.5).position() - pose.position()).normalize();
            let fwd = pose.forward();
            prop_assert!(d.dot(&fwd) > 1.0 - 1e-4);
        }
    }
}
