//! Synthetic drive data: 3D LIDAR scans raycast against the tunnel world,
//! wheel/gyro dead reckoning with drift, and GPS fixes that drop out between
//! the portals.
//!
//! The simulator is the workbench's data source. Ground truth is integrated
//! at the dead-reckoning rate (40 Hz) by a lane-keeping controller; LIDAR
//! frames are emitted at 10 Hz with the averaged DR increments covering the
//! frame interval, so integrating noiseless DR reproduces the truth exactly
//! on straight runs. Everything is deterministic per seed.

use crate::geom::{wrap_angle, Pose2D};
use crate::tunnel::{
    place_facilities, FacilityBox, FacilityRule, TunnelError, TunnelSpec,
    LANE_PAINT_HALF_WIDTH,
};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Tunnel(#[from] TunnelError),
    #[error("route speed must be positive, got {0} m/s")]
    BadSpeed(f64),
    #[error("route lane {lane} outside 1..={lanes}")]
    BadLane { lane: u32, lanes: u32 },
}

// ---------------------------------------------------------------------------
// Sensor and scenario models
// ---------------------------------------------------------------------------

/// Spinning multi-channel LIDAR.
#[derive(Debug, Clone, Copy)]
pub struct LidarModel {
    pub channels: usize,
    /// Vertical field of view, degrees (lowest, highest channel).
    pub vfov_deg: (f64, f64),
    /// Horizontal angular resolution, degrees.
    pub h_res_deg: f64,
    pub range_max: f64,
    pub range_noise_sigma: f64,
    /// Frame rate, Hz.
    pub rate_hz: f64,
    /// Sensor height above the road surface, meters.
    pub mount_height: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            channels: 32,
            vfov_deg: (-25.0, 15.0),
            h_res_deg: 0.1,
            range_max: 200.0,
            range_noise_sigma: 0.01,
            rate_hz: 10.0,
            mount_height: 1.9,
        }
    }
}

/// Dead-reckoning sensor suite: wheel-speed + yaw gyro.
#[derive(Debug, Clone, Copy)]
pub struct DrModel {
    /// Constant gyro bias, rad/s (default 10 deg/h).
    pub gyro_bias: f64,
    /// Gyro white-noise density, rad/s/sqrt(Hz) (default 0.01 deg/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Accelerometer bias, m/s^2 (default 15 micro-g); drifts the speed
    /// measurement linearly with time.
    pub accel_bias: f64,
    /// Per-sample speed measurement noise, m/s.
    pub speed_noise: f64,
    /// Sample rate, Hz.
    pub rate_hz: f64,
}

impl Default for DrModel {
    fn default() -> Self {
        Self {
            gyro_bias: 10.0_f64.to_radians() / 3600.0,
            gyro_noise_density: 0.01_f64.to_radians(),
            accel_bias: 15e-6 * 9.80665,
            speed_noise: 0.03,
            rate_hz: 40.0,
        }
    }
}

impl DrModel {
    /// Everything-zero variant for exactness tests.
    pub fn ideal() -> Self {
        Self { gyro_bias: 0.0, gyro_noise_density: 0.0, accel_bias: 0.0, speed_noise: 0.0, rate_hz: 40.0 }
    }

    fn gyro_sample_sigma(&self) -> f64 {
        self.gyro_noise_density * self.rate_hz.sqrt()
    }
}

/// GPS receiver: valid in the open, silent between the portals.
#[derive(Debug, Clone, Copy)]
pub struct GpsModel {
    /// Circular error probable, meters.
    pub cep: f64,
    /// Standard deviation of the per-run constant position bias, meters.
    pub bias_sigma: f64,
}

impl Default for GpsModel {
    fn default() -> Self {
        Self { cep: 2.5, bias_sigma: 1.5 }
    }
}

impl GpsModel {
    /// Per-axis Gaussian sigma equivalent to the CEP.
    pub fn sigma_axis(&self) -> f64 {
        self.cep / 1.1774
    }
}

/// Other vehicles sharing the tunnel, as ray-blocking boxes.
#[derive(Debug, Clone, Copy)]
pub struct OccluderModel {
    /// Vehicles per 100 m per non-ego lane.
    pub density_per_100m_lane: f64,
    /// Magnitude of speed relative to the route speed, km/h (sign seeded).
    pub rel_speed_kmh: f64,
    /// Body size (width, length, height), meters.
    pub size: [f64; 3],
}

impl Default for OccluderModel {
    fn default() -> Self {
        Self { density_per_100m_lane: 0.3, rel_speed_kmh: 10.0, size: [1.8, 4.5, 1.5] }
    }
}

/// Drive plan: lane-keeping at constant speed with a gentle seeded wander.
#[derive(Debug, Clone, Copy)]
pub struct Route {
    pub lane: u32,
    pub speed_mps: f64,
    /// Open-road run-up before the entry portal, meters.
    pub approach: f64,
    /// Distance past the exit portal before the run ends, meters.
    pub overrun: f64,
    /// Amplitude of the in-lane lateral wander, meters.
    pub wander_amp: f64,
    pub wander_wavelength: f64,
}

impl Default for Route {
    fn default() -> Self {
        Self {
            lane: 2,
            speed_mps: 100.0 / 3.6,
            approach: 120.0,
            overrun: 60.0,
            wander_amp: 0.1,
            wander_wavelength: 180.0,
        }
    }
}

/// Full simulation scenario.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub spec: TunnelSpec,
    pub rules: Vec<FacilityRule>,
    pub lidar: LidarModel,
    pub dr: DrModel,
    pub gps: GpsModel,
    pub occluders: OccluderModel,
    pub route: Route,
    /// Peak wall surface deviation from the ideal ellipse, meters.
    pub roughness_amp: f64,
    /// Seeds the world (facility jitter, wall texture) — shared by every run
    /// that uses the same maps.
    pub map_seed: u64,
    /// Seeds the run (sensor noise, traffic, wander phase).
    pub run_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            spec: TunnelSpec::default(),
            rules: crate::tunnel::default_rules(),
            lidar: LidarModel::default(),
            dr: DrModel::default(),
            gps: GpsModel::default(),
            occluders: OccluderModel::default(),
            route: Route::default(),
            roughness_amp: 0.04,
            map_seed: 1,
            run_seed: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

pub use crate::tunnel::Roughness;

/// Static tunnel world: geometry, installed facilities, wall texture.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: TunnelSpec,
    pub boxes: Vec<FacilityBox>,
    pub roughness: Roughness,
}

impl World {
    pub fn new(
        spec: TunnelSpec,
        rules: &[FacilityRule],
        map_seed: u64,
        roughness_amp: f64,
    ) -> Result<Self, TunnelError> {
        spec.validate()?;
        let roughness = Roughness::new(roughness_amp, map_seed);
        let boxes = place_facilities(&spec, rules, map_seed, &roughness)?;
        Ok(Self { spec, boxes, roughness })
    }
}

/// A transient ray-blocking box (another vehicle) in tunnel coordinates;
/// sits on the road, so its vertical center is `half[2]`.
#[derive(Debug, Clone, Copy)]
pub struct Obstacle {
    pub s: f64,
    pub u: f64,
    pub half: [f64; 3],
}

// ---------------------------------------------------------------------------
// Scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ScanPoint {
    /// Vehicle frame: x right, y forward, z up from the road surface.
    pub pos: Vector3<f64>,
    pub intensity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub points: Vec<ScanPoint>,
}

/// One 10 Hz tick of the drive.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub t: f64,
    pub truth: Pose2D,
    pub scan: Scan,
    /// Mean measured speed over the frame interval, m/s.
    pub dr_speed: f64,
    /// Mean measured yaw rate over the frame interval, rad/s.
    pub dr_yaw_rate: f64,
    /// Position fix in the local plane; `None` between the portals.
    pub gps: Option<Vector2<f64>>,
}

// ---------------------------------------------------------------------------
// Raycasting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Surface {
    Wall,
    Paint,
    Asphalt,
    Facility,
    Occluder,
}

impl Surface {
    fn intensity(self) -> (f64, f64) {
        match self {
            Surface::Wall => (40.0, 10.0),
            Surface::Paint => (200.0, 10.0),
            Surface::Asphalt => (20.0, 10.0),
            Surface::Facility => (120.0, 20.0),
            Surface::Occluder => (60.0, 10.0),
        }
    }
}

/// An oriented box candidate prepared in the local plane.
struct CandBox {
    c: Vector3<f64>,
    ux: Vector2<f64>, // lateral axis (tunnel rightward at the box's station)
    fy: Vector2<f64>, // station axis
    half: [f64; 3],
    surface: Surface,
}

const T_MIN: f64 = 0.3;

fn obb_hit(b: &CandBox, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let ro = Vector2::new(o.x - b.c.x, o.y - b.c.y);
    let po = [ro.dot(&b.ux), ro.dot(&b.fy), o.z - b.c.z];
    let dxy = Vector2::new(d.x, d.y);
    let pd = [dxy.dot(&b.ux), dxy.dot(&b.fy), d.z];
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..3 {
        if pd[i].abs() < 1e-12 {
            if po[i].abs() > b.half[i] {
                return None;
            }
        } else {
            let inv = 1.0 / pd[i];
            let t1 = (-b.half[i] - po[i]) * inv;
            let t2 = (b.half[i] - po[i]) * inv;
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
            if lo > hi {
                return None;
            }
        }
    }
    (lo >= T_MIN && lo < t_max).then_some(lo)
}

/// Straight-tunnel wall intersection in tunnel coordinates (u, s, z).
/// Returns (t, s_hit, u_hit, z_hit).
fn wall_hit_straight(
    spec: &TunnelSpec,
    o: &Vector3<f64>, // (u, s, z)
    d: &Vector3<f64>,
    t_max: f64,
) -> Option<(f64, f64, f64, f64)> {
    let (a, b) = (spec.a, spec.b);
    let qa = (d.x / a).powi(2) + (d.z / b).powi(2);
    if qa < 1e-18 {
        return None;
    }
    let qb = 2.0 * (o.x * d.x / (a * a) + o.z * d.z / (b * b));
    let qc = (o.x / a).powi(2) + (o.z / b).powi(2) - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t = (-qb - sq) / (2.0 * qa);
    if t < T_MIN {
        t = (-qb + sq) / (2.0 * qa);
    }
    if t < T_MIN || t >= t_max {
        return None;
    }
    let z = o.z + t * d.z;
    if z < -0.02 {
        return None;
    }
    let s = o.y + t * d.y;
    if !(0.0..=spec.length).contains(&s) {
        return None;
    }
    Some((t, s, o.x + t * d.x, z))
}

/// Curved-tunnel wall intersection in the local plane, by sphere tracing the
/// tube function. The cross-section point of a unit-speed ray moves at most
/// at unit speed, and the shrunk-coordinate norm sqrt(E) changes by at most
/// 1/min(a,b) per meter, so from E < 1 the surface is at least
/// (1 - sqrt(E)) * min(a,b) away — safe to step that far. A Newton polish
/// lands on the surface once close. Returns (t, s_hit, u_hit, z_hit).
fn wall_hit_curved(
    spec: &TunnelSpec,
    o: &Vector3<f64>, // local (x, y, z)
    d: &Vector3<f64>,
    t_max: f64,
) -> Option<(f64, f64, f64, f64)> {
    let k = spec.curvature;
    let r = 1.0 / k.abs();
    let p0 = spec.entry.position();
    let left0 = Vector2::new(-spec.entry.psi.sin(), spec.entry.psi.cos());
    let center = p0 + left0 / k;
    let w0 = Vector2::new(o.x, o.y) - center;
    let dxy = Vector2::new(d.x, d.y);
    // rho^2(t) = c0 + c1 t + c2 t^2, the squared distance to the arc center.
    let c0 = w0.norm_squared();
    let c1 = 2.0 * w0.dot(&dxy);
    let c2 = dxy.norm_squared();
    let (a, b) = (spec.a, spec.b);
    let b_min = a.min(b);
    // (f, df/dt, |du/dt|-ish radial rate) at ray parameter t; f < 0 inside.
    let eval = |t: f64| -> (f64, f64, f64) {
        let rho = (c0 + t * (c1 + t * c2)).sqrt();
        let u = rho - r;
        let z = o.z + t * d.z;
        let du = (0.5 * c1 + c2 * t) / rho;
        let f = (u / a).powi(2) + (z / b).powi(2) - 1.0;
        let fp = 2.0 * (u / (a * a)) * du + 2.0 * (z / (b * b)) * d.z;
        (f, fp, du)
    };
    let finish = |th: f64| -> Option<(f64, f64, f64, f64)> {
        let pxy = Vector2::new(o.x, o.y) + th * dxy;
        let (s, u) = spec.station_of(pxy);
        let z = o.z + th * d.z;
        (z >= -0.02 && (0.0..=spec.length).contains(&s)).then_some((th, s, u, z))
    };
    // Growth rate of the cross-section speed; the ray stays well clear of the
    // arc center, whose distance bounds the radial direction's rotation.
    let lips = 1.0 / (r - t_max).max(50.0);
    let mut t = T_MIN;
    while t < t_max {
        let (f, _fp, du) = eval(t);
        let dist = ((f + 1.0).max(0.0).sqrt() - 1.0).abs() * b_min;
        // Trigger the polish before the minimum step could cross the shell.
        if f < 0.0 && dist < 0.15 {
            // Newton onto the surface ahead.
            let mut tn = t;
            let mut hit = None;
            for _ in 0..30 {
                let (fn_, fpn, _) = eval(tn);
                if fn_.abs() < 1e-12 {
                    hit = Some(tn);
                    break;
                }
                if fpn <= 1e-9 {
                    break; // tangential graze: treat as a miss here
                }
                tn -= fn_ / fpn;
                if !(T_MIN..=t_max).contains(&tn) {
                    break;
                }
            }
            match hit {
                Some(th) => match finish(th) {
                    Some(res) => return Some(res),
                    // Phantom surface through a portal: step past, go on.
                    None => t = th + 0.05,
                },
                None => t += 0.35,
            }
            continue;
        }
        let g = (du * du + d.z * d.z).sqrt().max(1e-9);
        let budget = 0.9 * dist.max(0.02);
        let step = ((g * g + 2.0 * lips * budget).sqrt() - g) / lips;
        t += step.max(0.1);
    }
    None
}

fn gauss(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        0.0
    } else {
        let n: f64 = rng.sample(StandardNormal);
        n * sigma
    }
}

/// Per-channel beam elevations, degrees, ascending from the bottom of the
/// field of view to its top.
///
/// Multi-beam sensors do not spread their channels evenly: most beams pack
/// into a dense band around the horizon, where targets live, and the rest
/// fan out to the field-of-view edges at a coarser, uniform pitch. Layout:
/// 60% of the beam spacings cover the part of [-4°, +4°] inside the field
/// of view; the remainder split over the outer sections in proportion to
/// their spans, so both edges share one pitch.
pub fn channel_elevations(lidar: &LidarModel) -> Vec<f64> {
    let (lo, hi) = lidar.vfov_deg;
    let n = lidar.channels;
    if n <= 1 {
        return vec![lo];
    }
    let d_lo = lo.max(-4.0).min(hi);
    let d_hi = hi.min(4.0).max(d_lo);
    let outer = (d_lo - lo) + (hi - d_hi);
    if d_hi <= d_lo || outer <= 0.0 {
        // Field of view misses the horizon band, or sits inside it: even.
        return (0..n).map(|j| lo + j as f64 * (hi - lo) / (n - 1) as f64).collect();
    }
    // Cumulative knots: fraction of channels laid down by each elevation.
    let t1 = 0.4 * (d_lo - lo) / outer;
    let t2 = t1 + 0.6;
    (0..n)
        .map(|j| {
            let t = j as f64 / (n - 1) as f64;
            if t < t1 {
                lo + (d_lo - lo) * t / t1
            } else if t <= t2 {
                d_lo + (d_hi - d_lo) * (t - t1) / 0.6
            } else {
                d_hi + (hi - d_hi) * (t - t2) / (1.0 - t2)
            }
        })
        .collect()
}

/// Cast one full LIDAR frame from `truth` against the world plus transient
/// obstacles. Points come back in the vehicle frame.
pub fn raycast_scan(
    world: &World,
    truth: Pose2D,
    lidar: &LidarModel,
    obstacles: &[Obstacle],
    rng: &mut ChaCha12Rng,
) -> Scan {
    let spec = &world.spec;
    let n_az = ((360.0 / lidar.h_res_deg).round() as usize).max(1);
    let az_tab: Vec<(f64, f64)> = (0..n_az)
        .map(|i| (i as f64 * lidar.h_res_deg).to_radians().sin_cos())
        .collect();
    let ch_tab: Vec<(f64, f64)> =
        channel_elevations(lidar).iter().map(|eps| eps.to_radians().sin_cos()).collect();

    let pos = truth.position();
    let fwd = truth.forward();
    let rgt = truth.right();
    let (s_v, u_v) = spec.station_of(pos);
    let straight = spec.curvature == 0.0;
    // Tunnel axes for the straight fast path.
    let u_axis = spec.entry.right();
    let s_axis = spec.entry.forward();
    let line_offsets = spec.lane_line_offsets();

    // Collect candidate boxes within sensing range and register them in
    // azimuth bins so each ray only tests a handful.
    let mut cands: Vec<CandBox> = Vec::new();
    let add_box = |cands: &mut Vec<CandBox>, s: f64, u: f64, z: f64, half: [f64; 3], surface: Surface| {
        if (s - s_v).abs() > lidar.range_max + 25.0 {
            return;
        }
        let pose_b = spec.pose_at(s);
        let cxy = pose_b.position() + u * pose_b.right();
        cands.push(CandBox {
            c: Vector3::new(cxy.x, cxy.y, z),
            ux: pose_b.right(),
            fy: pose_b.forward(),
            half,
            surface,
        });
    };
    for fb in &world.boxes {
        add_box(&mut cands, fb.s, fb.u, fb.z, fb.half, Surface::Facility);
    }
    for ob in obstacles {
        add_box(&mut cands, ob.s, ob.u, ob.half[2], ob.half, Surface::Occluder);
    }
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n_az];
    for (ci, cb) in cands.iter().enumerate() {
        let rel = Vector2::new(cb.c.x - pos.x, cb.c.y - pos.y);
        let dist = rel.norm();
        let radius = (cb.half[0].powi(2) + cb.half[1].powi(2) + cb.half[2].powi(2)).sqrt();
        if dist <= radius + 1.0 {
            for bin in bins.iter_mut() {
                bin.push(ci as u32);
            }
            continue;
        }
        let az_c = rel.dot(&rgt).atan2(rel.dot(&fwd));
        let ang = (radius + 0.3).atan2(dist) + lidar.h_res_deg.to_radians();
        let lo = ((az_c - ang).to_degrees() / lidar.h_res_deg).floor() as i64;
        let hi = ((az_c + ang).to_degrees() / lidar.h_res_deg).ceil() as i64;
        for k in lo..=hi {
            let idx = (k.rem_euclid(n_az as i64)) as usize;
            bins[idx].push(ci as u32);
        }
    }

    let o_loc = Vector3::new(pos.x, pos.y, lidar.mount_height);
    let mut points = Vec::with_capacity(n_az * lidar.channels / 2);

    for (ai, &(sa, ca)) in az_tab.iter().enumerate() {
        for &(se, ce) in &ch_tab {
            // Vehicle frame: azimuth clockwise from forward, elevation up.
            let dv = Vector3::new(sa * ce, ca * ce, se);
            let dxy = dv.x * rgt + dv.y * fwd;
            let d_loc = Vector3::new(dxy.x, dxy.y, dv.z);

            let mut best: Option<(f64, Surface)> = None;
            let mut t_best = lidar.range_max;

            // Ground plane.
            if d_loc.z < -1e-9 {
                let t_g = -lidar.mount_height / d_loc.z;
                if t_g >= T_MIN && t_g < t_best {
                    let pxy = Vector2::new(o_loc.x + t_g * d_loc.x, o_loc.y + t_g * d_loc.y);
                    let (_, u_h) = spec.station_of(pxy);
                    let paint =
                        line_offsets.iter().any(|off| (u_h - off).abs() <= LANE_PAINT_HALF_WIDTH);
                    best = Some((t_g, if paint { Surface::Paint } else { Surface::Asphalt }));
                    t_best = t_g;
                }
            }

            // Tunnel wall.
            let wall = if straight {
                let o_tun = Vector3::new(u_v, s_v, lidar.mount_height);
                let d_tun =
                    Vector3::new(dxy.dot(&u_axis), dxy.dot(&s_axis), d_loc.z);
                wall_hit_straight(spec, &o_tun, &d_tun, t_best)
            } else {
                wall_hit_curved(spec, &o_loc, &d_loc, t_best)
            };
            if let Some((mut t_w, s_h, u_h, z_h)) = wall {
                // Deform the ideal surface by the roughness field: shift the
                // hit along the ray by the inward deviation over the
                // ray/normal alignment.
                let theta = z_h.atan2(u_h);
                let dev = world.roughness.value(s_h, theta);
                if dev != 0.0 {
                    let n = Vector2::new(u_h / (spec.a * spec.a), z_h / (spec.b * spec.b))
                        .normalize();
                    let d_u = if straight {
                        dxy.dot(&u_axis)
                    } else {
                        dxy.dot(&spec.pose_at(s_h).right())
                    };
                    let denom = (Vector2::new(d_u, d_loc.z).dot(&n)).max(0.15);
                    t_w -= (dev / denom).clamp(-0.5, 0.5);
                }
                if t_w >= T_MIN && t_w < t_best {
                    best = Some((t_w, Surface::Wall));
                    t_best = t_w;
                }
            }

            // Facility and occluder boxes from this azimuth's bin.
            for &ci in &bins[ai] {
                let cb = &cands[ci as usize];
                if let Some(t_b) = obb_hit(cb, &o_loc, &d_loc, t_best) {
                    best = Some((t_b, cb.surface));
                    t_best = t_b;
                }
            }

            let Some((t_hit, surface)) = best else { continue };
            let t_noisy = t_hit + gauss(rng, lidar.range_noise_sigma);
            if t_noisy <= 0.0 || t_noisy > lidar.range_max {
                continue;
            }
            let (i_mean, i_sigma) = surface.intensity();
            points.push(ScanPoint {
                pos: Vector3::new(
                    dv.x * t_noisy,
                    dv.y * t_noisy,
                    lidar.mount_height + dv.z * t_noisy,
                ),
                intensity: i_mean + gauss(rng, i_sigma),
            });
        }
    }
    Scan { points }
}

// ---------------------------------------------------------------------------
// Drive simulation
// ---------------------------------------------------------------------------

struct OccSpawn {
    s0: f64,
    u: f64,
    speed: f64,
}

/// Iterator over [`SimFrame`]s for one drive through the tunnel.
pub struct Simulator {
    cfg: SimConfig,
    world: World,
    pose: Pose2D,
    tick: u64,
    ticks_per_frame: u64,
    end_s: f64,
    done: bool,
    wander_phase: f64,
    gps_bias: Vector2<f64>,
    occluders: Vec<OccSpawn>,
    rng_dr: ChaCha12Rng,
    rng_gps: ChaCha12Rng,
    rng_lidar: ChaCha12Rng,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        if !(cfg.route.speed_mps > 0.0) {
            return Err(SimError::BadSpeed(cfg.route.speed_mps));
        }
        if cfg.route.lane < 1 || cfg.route.lane > cfg.spec.lane_count {
            return Err(SimError::BadLane { lane: cfg.route.lane, lanes: cfg.spec.lane_count });
        }
        let world = World::new(cfg.spec.clone(), &cfg.rules, cfg.map_seed, cfg.roughness_amp)?;

        let mut rng_route = ChaCha12Rng::seed_from_u64(cfg.run_seed ^ 0x526f_7574_65u64);
        let wander_phase = rng_route.random_range(0.0..std::f64::consts::TAU);

        let mut rng_gps = ChaCha12Rng::seed_from_u64(cfg.run_seed ^ 0x4770_73u64);
        let gps_bias = Vector2::new(
            gauss(&mut rng_gps, cfg.gps.bias_sigma),
            gauss(&mut rng_gps, cfg.gps.bias_sigma),
        );

        let mut rng_occ = ChaCha12Rng::seed_from_u64(cfg.run_seed ^ 0x4f63_636cu64);
        let span = cfg.spec.length + cfg.route.approach + cfg.route.overrun + 200.0;
        let per_lane = (cfg.occluders.density_per_100m_lane * span / 100.0).round() as usize;
        let mut occluders = Vec::new();
        for lane in 1..=cfg.spec.lane_count {
            if lane == cfg.route.lane {
                continue;
            }
            let u_lane = cfg.spec.lane_center_offset(lane);
            for _ in 0..per_lane {
                let s0 = rng_occ.random_range(-cfg.route.approach - 100.0..cfg.spec.length + 100.0);
                let sign = if rng_occ.random_bool(0.5) { 1.0 } else { -1.0 };
                let speed = cfg.route.speed_mps + sign * cfg.occluders.rel_speed_kmh / 3.6;
                let u = u_lane + rng_occ.random_range(-0.3..0.3);
                occluders.push(OccSpawn { s0, u, speed });
            }
        }

        // Start on the approach road, on the target line, heading down it.
        let s0 = -cfg.route.approach;
        let u0 = cfg.spec.lane_center_offset(cfg.route.lane)
            + cfg.route.wander_amp
                * (std::f64::consts::TAU * s0 / cfg.route.wander_wavelength + wander_phase).sin();
        let p0 = cfg.spec.local_of(s0, u0);
        let pose = Pose2D::new(p0.x, p0.y, cfg.spec.pose_at(s0).psi);

        let ticks_per_frame = (cfg.dr.rate_hz / cfg.lidar.rate_hz).round().max(1.0) as u64;
        let end_s = cfg.spec.length + cfg.route.overrun;
        Ok(Self {
            rng_dr: ChaCha12Rng::seed_from_u64(cfg.run_seed ^ 0x4452u64),
            rng_lidar: ChaCha12Rng::seed_from_u64(cfg.run_seed ^ 0x4c69_6461_72u64),
            rng_gps,
            cfg,
            world,
            pose,
            tick: 0,
            ticks_per_frame,
            end_s,
            done: false,
            wander_phase,
            gps_bias,
            occluders,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Lane-keeping yaw-rate command at the current truth state.
    fn control(&self, s: f64, u: f64) -> f64 {
        let route = &self.cfg.route;
        let u_des = self.cfg.spec.lane_center_offset(route.lane)
            + route.wander_amp
                * (std::f64::consts::TAU * s / route.wander_wavelength + self.wander_phase).sin();
        let e = u_des - u;
        // Positive error = need to move right = heading offset to the right
        // (negative, headings being counterclockwise).
        let dpsi_des = (-(2.0 * e) / route.speed_mps.max(8.0)).atan().clamp(-0.15, 0.15);
        let psi_des = self.cfg.spec.pose_at(s).psi + dpsi_des;
        let ff = self.cfg.spec.curvature * route.speed_mps;
        (3.0 * wrap_angle(psi_des - self.pose.psi) + ff).clamp(-0.4, 0.4)
    }

    fn obstacles_at(&self, t: f64, s_v: f64) -> Vec<Obstacle> {
        let half = [
            self.cfg.occluders.size[0] / 2.0,
            self.cfg.occluders.size[1] / 2.0,
            self.cfg.occluders.size[2] / 2.0,
        ];
        self.occluders
            .iter()
            .filter_map(|o| {
                let s = o.s0 + o.speed * t;
                ((s - s_v).abs() < self.cfg.lidar.range_max + 25.0)
                    .then_some(Obstacle { s, u: o.u, half })
            })
            .collect()
    }
}

impl Iterator for Simulator {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.done {
            return None;
        }
        let dt = 1.0 / self.cfg.dr.rate_hz;
        let mut speed_sum = 0.0;
        let mut yaw_sum = 0.0;
        for _ in 0..self.ticks_per_frame {
            let (s, u) = self.cfg.spec.station_of(self.pose.position());
            let omega = self.control(s, u);
            let v = self.cfg.route.speed_mps;
            // Integrate position with the pre-update heading, then heading —
            // the same order the downstream dead-reckoning integration uses.
            let p = self.pose.position() + v * dt * self.pose.forward();
            self.pose = Pose2D::new(p.x, p.y, self.pose.psi + omega * dt);
            self.tick += 1;

            let t_tick = self.tick as f64 * dt;
            speed_sum += v
                + self.cfg.dr.accel_bias * t_tick
                + gauss(&mut self.rng_dr, self.cfg.dr.speed_noise);
            yaw_sum += omega
                + self.cfg.dr.gyro_bias
                + gauss(&mut self.rng_dr, self.cfg.dr.gyro_sample_sigma());
        }
        let n = self.ticks_per_frame as f64;
        let t = self.tick as f64 * dt;
        let truth = self.pose;
        let (s_v, _) = self.cfg.spec.station_of(truth.position());

        let obstacles = self.obstacles_at(t, s_v);
        let scan =
            raycast_scan(&self.world, truth, &self.cfg.lidar, &obstacles, &mut self.rng_lidar);

        let in_tunnel = (0.0..=self.cfg.spec.length).contains(&s_v);
        let gps = if in_tunnel {
            None
        } else {
            let sigma = self.cfg.gps.sigma_axis();
            Some(
                truth.position()
                    + self.gps_bias
                    + Vector2::new(gauss(&mut self.rng_gps, sigma), gauss(&mut self.rng_gps, sigma)),
            )
        };

        if s_v >= self.end_s {
            self.done = true;
        }
        Some(SimFrame { t, truth, scan, dr_speed: speed_sum / n, dr_yaw_rate: yaw_sum / n, gps })
    }
}
