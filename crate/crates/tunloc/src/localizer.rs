//! Tunnel-entry position compensation and the EKF navigation filter.
//!
//! The filter state is the planar vehicle pose (x, y, ψ). Outside the tunnel
//! it runs as a plain GPS/DR filter. At the portal GPS drops out while the
//! accumulated GPS bias — metres, more than the map-matching association
//! gate — is still baked into the estimate, so a one-shot entry compensation
//! bootstraps the pose before tracking starts: the current lane is read from
//! the wall distances, the lateral error is corrected against a
//! fire-extinguisher lamp under the assumption that the vehicle rides near
//! its lane center, and the longitudinal error is corrected against the
//! first lane-control-signal row. From then on every scan contributes two
//! measurement groups: a pose pseudo-measurement η from NDT matching of lane
//! paint against the distribution map, and range/bearing pairs from facility
//! detections matched to the point-landmark map.

use crate::extract::{extract, Alignment, ExtractConfig, ExtractContext, ExtractError};
use crate::geom::{wrap_angle, Pose2D};
use crate::registration::{associate_landmarks, ndt_match, NdtParams};
use crate::sim::{Scan, SimFrame};
use crate::tunnel::{FacilityKind, FacilityRule, LandmarkMap, LaneDistMap, TunnelSpec};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LocError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("time step {0} must be positive")]
    BadTimeStep(f64),
    #[error("landmark coincides with the vehicle position")]
    CoincidentLandmark,
    #[error("innovation covariance is numerically singular; update skipped")]
    SingularInnovation,
    #[error("wall not visible on both sides ({left} left / {right} right points, need 10)")]
    WallNotVisible { left: usize, right: usize },
    #[error("no lamp detection matched a map lamp")]
    NoLampMatched,
    #[error("no LCS detection matched the map")]
    NoLcsDetected,
    #[error("noise covariance {0} is not positive definite")]
    BadNoise(&'static str),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

// ---------------------------------------------------------------------------
// Filter state
// ---------------------------------------------------------------------------

/// Where the filter is in the drive, which decides what each step does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocMode {
    /// Open road: GPS position updates over dead reckoning.
    GpsDr,
    /// Just inside the portal: lane determination and the one-shot lateral /
    /// longitudinal corrections, dead reckoning in between.
    EntryCompensation,
    /// Bootstrapped: full map-matching measurement updates every scan.
    TunnelTracking,
}

/// EKF state: pose estimate, its covariance, and the mode machine position.
#[derive(Debug, Clone, Copy)]
pub struct FilterState {
    pub mean: Pose2D,
    /// Covariance over (x, y, ψ); symmetric positive semi-definite.
    pub cov: Matrix3<f64>,
    pub mode: LocMode,
}

impl FilterState {
    pub fn new(mean: Pose2D, cov: Matrix3<f64>) -> Self {
        Self { mean, cov: ensure_psd(&cov), mode: LocMode::GpsDr }
    }

    /// Estimation error against a reference pose, heading wrapped.
    pub fn error_to(&self, truth: &Pose2D) -> Vector3<f64> {
        Vector3::new(
            self.mean.x - truth.x,
            self.mean.y - truth.y,
            wrap_angle(self.mean.psi - truth.psi),
        )
    }

    /// Normalized estimation error squared against a reference pose; under
    /// consistent noise it follows a chi-square with 3 degrees of freedom.
    pub fn nees(&self, truth: &Pose2D) -> f64 {
        let e = self.error_to(truth);
        match self.cov.try_inverse() {
            Some(inv) => (e.transpose() * inv * e)[(0, 0)],
            None => f64::INFINITY,
        }
    }
}

/// Symmetrize and clamp tiny negative eigenvalues so the covariance stays
/// positive semi-definite through long update chains.
fn ensure_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = nalgebra::SymmetricEigen::new(sym);
    let mut clamped = false;
    for l in eig.eigenvalues.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
            clamped = true;
        }
    }
    if clamped {
        eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues) * eig.eigenvectors.transpose()
    } else {
        sym
    }
}

// ---------------------------------------------------------------------------
// Noise configuration
// ---------------------------------------------------------------------------

/// All filter noise covariances. The source material for this pipeline gives
/// none of them, so these are tuned defaults, fully configurable.
#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    /// Process noise per step, (m², m², rad²).
    pub q: Matrix3<f64>,
    /// Base noise of the NDT pose pseudo-measurement; inflated per frame
    /// along directions the NDT Hessian shows to be poorly constrained.
    pub r_eta: Matrix3<f64>,
    /// Per-landmark range/bearing noise, (m², rad²).
    pub r_rb: Matrix2<f64>,
    /// GPS position noise, used only outside the tunnel.
    pub r_gps: Matrix2<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            q: Matrix3::from_diagonal(&Vector3::new(0.05 * 0.05, 0.05 * 0.05, (0.1 * deg).powi(2))),
            r_eta: Matrix3::from_diagonal(&Vector3::new(0.08 * 0.08, 0.08 * 0.08, (0.3 * deg).powi(2))),
            r_rb: Matrix2::from_diagonal(&Vector2::new(0.3 * 0.3, (1.0 * deg).powi(2))),
            r_gps: Matrix2::from_diagonal(&Vector2::new(2.5 * 2.5, 2.5 * 2.5)),
        }
    }
}

impl NoiseConfig {
    /// All four covariances must be positive definite.
    pub fn validate(&self) -> Result<(), LocError> {
        if nalgebra::Cholesky::new(self.q).is_none() {
            return Err(LocError::BadNoise("Q"));
        }
        if nalgebra::Cholesky::new(self.r_eta).is_none() {
            return Err(LocError::BadNoise("R_eta"));
        }
        if nalgebra::Cholesky::new(self.r_rb).is_none() {
            return Err(LocError::BadNoise("R_rb"));
        }
        if nalgebra::Cholesky::new(self.r_gps).is_none() {
            return Err(LocError::BadNoise("R_gps"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

/// One matched facility landmark: measured range/bearing plus the map
/// position it was matched to.
#[derive(Debug, Clone, Copy)]
pub struct RangeBearing {
    /// Measured range, meters (> 0).
    pub r: f64,
    /// Measured bearing relative to the vehicle heading, radians, wrapped.
    pub beta: f64,
    /// Matched landmark position in the local plane.
    pub landmark: Vector2<f64>,
}

/// Everything one scan contributes to the measurement update.
#[derive(Debug, Clone, Default)]
pub struct MeasurementBundle {
    /// Pose pseudo-measurement from NDT lane matching.
    pub eta: Option<Pose2D>,
    /// Per-frame noise for `eta`; falls back to [`NoiseConfig::r_eta`].
    pub eta_noise: Option<Matrix3<f64>>,
    pub pairs: Vec<RangeBearing>,
}

impl MeasurementBundle {
    pub fn is_empty(&self) -> bool {
        self.eta.is_none() && self.pairs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// EKF core
// ---------------------------------------------------------------------------

/// Propagate the pose by dead reckoning over `dt` seconds and grow the
/// covariance by the process noise (the state transition is identity, so
/// F P Fᵀ + Q reduces to P + Q).
pub fn time_update(
    state: &FilterState,
    v: f64,
    yaw_rate: f64,
    dt: f64,
    q: &Matrix3<f64>,
) -> Result<FilterState, LocError> {
    if !v.is_finite() || !yaw_rate.is_finite() {
        return Err(LocError::NonFinite("dead-reckoning input"));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(LocError::BadTimeStep(dt));
    }
    let m = state.mean;
    let mean = Pose2D::new(
        m.x + dt * v * m.psi.cos(),
        m.y + dt * v * m.psi.sin(),
        wrap_angle(m.psi + dt * yaw_rate),
    );
    Ok(FilterState { mean, cov: ensure_psd(&(state.cov + q)), mode: state.mode })
}

/// Predicted range and bearing from a pose to a landmark.
pub fn predict_measurement(pose: &Pose2D, landmark: Vector2<f64>) -> Result<(f64, f64), LocError> {
    let dx = landmark.x - pose.x;
    let dy = landmark.y - pose.y;
    let r = (dx * dx + dy * dy).sqrt();
    if r < 1e-9 {
        return Err(LocError::CoincidentLandmark);
    }
    Ok((r, wrap_angle(dy.atan2(dx) - pose.psi)))
}

/// Jacobian of (range, bearing) with respect to (x, y, ψ): the two stacked
/// rows are `[A B 0]` and `[C D -1]`.
pub fn landmark_jacobian(pose: &Pose2D, landmark: Vector2<f64>) -> nalgebra::Matrix2x3<f64> {
    let dx = landmark.x - pose.x;
    let dy = landmark.y - pose.y;
    let r2 = dx * dx + dy * dy;
    let r = r2.sqrt();
    nalgebra::Matrix2x3::new(-dx / r, -dy / r, 0.0, dy / r2, -dx / r2, -1.0)
}

/// EKF measurement update over the stacked bundle: three identity rows for
/// η (when present) followed by a range row and a bearing row per landmark.
/// Angle innovations are wrapped; the covariance uses the Joseph form so it
/// stays positive semi-definite. An empty bundle is the identity.
pub fn measurement_update(
    state: &FilterState,
    bundle: &MeasurementBundle,
    noise: &NoiseConfig,
) -> Result<FilterState, LocError> {
    let n_eta = if bundle.eta.is_some() { 3 } else { 0 };
    let m = n_eta + 2 * bundle.pairs.len();
    if m == 0 {
        return Ok(*state);
    }

    let pose = state.mean;
    let mut h = DMatrix::<f64>::zeros(m, 3);
    let mut r_mat = DMatrix::<f64>::zeros(m, m);
    let mut nu = DVector::<f64>::zeros(m);

    if let Some(eta) = bundle.eta {
        let r_eta = bundle.eta_noise.unwrap_or(noise.r_eta);
        for i in 0..3 {
            h[(i, i)] = 1.0;
            for j in 0..3 {
                r_mat[(i, j)] = r_eta[(i, j)];
            }
        }
        nu[0] = eta.x - pose.x;
        nu[1] = eta.y - pose.y;
        nu[2] = wrap_angle(eta.psi - pose.psi);
    }

    for (k, pair) in bundle.pairs.iter().enumerate() {
        if !(pair.r > 0.0) || !pair.beta.is_finite() {
            return Err(LocError::NonFinite("range/bearing measurement"));
        }
        let (r_hat, beta_hat) = predict_measurement(&pose, pair.landmark)?;
        let jac = landmark_jacobian(&pose, pair.landmark);
        let row = n_eta + 2 * k;
        for j in 0..3 {
            h[(row, j)] = jac[(0, j)];
            h[(row + 1, j)] = jac[(1, j)];
        }
        r_mat[(row, row)] = noise.r_rb[(0, 0)];
        r_mat[(row, row + 1)] = noise.r_rb[(0, 1)];
        r_mat[(row + 1, row)] = noise.r_rb[(1, 0)];
        r_mat[(row + 1, row + 1)] = noise.r_rb[(1, 1)];
        nu[row] = pair.r - r_hat;
        nu[row + 1] = wrap_angle(wrap_angle(pair.beta) - beta_hat);
    }

    let p = state.cov;
    let hp = &h * DMatrix::from_fn(3, 3, |i, j| p[(i, j)]);
    let s = &hp * h.transpose() + &r_mat;
    let Some(chol) = nalgebra::Cholesky::new(s) else {
        return Err(LocError::SingularInnovation);
    };
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ (H P))ᵀ since S and P are symmetric.
    let k_t = chol.solve(&hp);
    let k = k_t.transpose();

    let delta = &k * &nu;
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(LocError::NonFinite("state correction"));
    }
    let mean = Pose2D::new(pose.x + delta[0], pose.y + delta[1], wrap_angle(pose.psi + delta[2]));

    let kh = &k * &h;
    let a = Matrix3::from_fn(|i, j| (if i == j { 1.0 } else { 0.0 }) - kh[(i, j)]);
    let krk = &k * &r_mat * k.transpose();
    let cov = a * p * a.transpose() + Matrix3::from_fn(|i, j| krk[(i, j)]);

    Ok(FilterState { mean, cov: ensure_psd(&cov), mode: state.mode })
}

/// Plain GPS position update, used only on the open road.
pub fn gps_update(
    state: &FilterState,
    fix: Vector2<f64>,
    r_gps: &Matrix2<f64>,
) -> Result<FilterState, LocError> {
    if !fix.x.is_finite() || !fix.y.is_finite() {
        return Err(LocError::NonFinite("gps fix"));
    }
    let p = state.cov;
    let p_xy = p.fixed_view::<2, 2>(0, 0).into_owned();
    let s = p_xy + r_gps;
    let Some(s_inv) = s.try_inverse() else {
        return Err(LocError::SingularInnovation);
    };
    // H = [I2 0], so K = P[:, 0..2] S⁻¹.
    let p_cols = p.fixed_view::<3, 2>(0, 0).into_owned();
    let k = p_cols * s_inv;
    let nu = fix - Vector2::new(state.mean.x, state.mean.y);
    let delta = k * nu;
    let mean = Pose2D::new(
        state.mean.x + delta[0],
        state.mean.y + delta[1],
        wrap_angle(state.mean.psi + delta[2]),
    );
    let mut kh = Matrix3::<f64>::zeros();
    kh.fixed_view_mut::<3, 2>(0, 0).copy_from(&k);
    let a = Matrix3::identity() - kh;
    let krk = k * r_gps * k.transpose();
    let cov = a * p * a.transpose() + krk;
    Ok(FilterState { mean, cov: ensure_psd(&cov), mode: state.mode })
}

/// Per-frame η noise: the base covariance inflated along directions the NDT
/// Hessian leaves poorly constrained. Inflation per direction is the ratio of
/// the strongest position curvature to that direction's curvature, clamped to
/// `max_inflation` — in a tunnel the solid lane lines constrain the lateral
/// and heading axes but say nothing along the road, so the along-track
/// variance hits the clamp.
pub fn eta_noise_from_hessian(
    base: &Matrix3<f64>,
    hessian: &Matrix3<f64>,
    max_inflation: f64,
) -> Matrix3<f64> {
    let curv = -hessian; // negative definite at a maximum → positive curvature
    let pos = Matrix2::new(curv[(0, 0)], 0.5 * (curv[(0, 1)] + curv[(1, 0)]),
                           0.5 * (curv[(0, 1)] + curv[(1, 0)]), curv[(1, 1)]);
    let eig = nalgebra::SymmetricEigen::new(pos);
    let lam_max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let base_pos = base[(0, 0)];
    let base_psi = base[(2, 2)];
    if !(lam_max > 0.0) || !lam_max.is_finite() {
        // No usable curvature: inflate everything.
        let mut out = Matrix3::zeros();
        out[(0, 0)] = base_pos * max_inflation;
        out[(1, 1)] = base_pos * max_inflation;
        out[(2, 2)] = base_psi * max_inflation;
        return out;
    }
    let mut d = Vector2::zeros();
    for i in 0..2 {
        let l = eig.eigenvalues[i];
        let f = if l > 0.0 { (lam_max / l).clamp(1.0, max_inflation) } else { max_inflation };
        d[i] = base_pos * f;
    }
    let r_pos = eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose();
    let c_psi = curv[(2, 2)];
    let f_psi = if c_psi > 0.0 { (lam_max / c_psi).clamp(1.0, max_inflation) } else { max_inflation };
    let mut out = Matrix3::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(&r_pos);
    out[(2, 2)] = base_psi * f_psi;
    out
}

// ---------------------------------------------------------------------------
// Lane determination
// ---------------------------------------------------------------------------

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Which lane the vehicle is in, from the wall distances of a scan that has
/// been yaw-aligned to the tunnel axis but is still centered on the vehicle.
/// Uses 20th-percentile distances in a chest-high band (which clears other
/// vehicles); the lateral offset from the tunnel center is half the distance
/// difference, and lanes count from 1 at the leftmost.
pub fn determine_lane(scan: &Scan, spec: &TunnelSpec) -> Result<u32, LocError> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for p in &scan.points {
        if !(2.2..=3.0).contains(&p.pos.z) {
            continue;
        }
        let x = p.pos.x;
        // The far wall from an off-center vehicle can sit at a + half the
        // lane span away; anything beyond that is not tunnel wall.
        if x.abs() < 2.0 || x.abs() > spec.a + spec.half_span() {
            continue;
        }
        if x < 0.0 {
            left.push(-x);
        } else {
            right.push(x);
        }
    }
    if left.len() < 10 || right.len() < 10 {
        return Err(LocError::WallNotVisible { left: left.len(), right: right.len() });
    }
    left.sort_by(|a, b| a.partial_cmp(b).unwrap());
    right.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d_left = percentile(&left, 0.20);
    let d_right = percentile(&right, 0.20);
    // Positive offset = right of the tunnel center, matching the lateral
    // coordinate used everywhere else.
    let offset = 0.5 * (d_left - d_right);
    let lane = ((offset + spec.half_span()) / spec.lane_width).floor() as i64 + 1;
    Ok(lane.clamp(1, spec.lane_count as i64) as u32)
}

// ---------------------------------------------------------------------------
// Entry compensation
// ---------------------------------------------------------------------------

/// Replace the covariance's lateral and/or longitudinal position variance
/// (axes taken from the current heading), decorrelating position from
/// heading. `None` keeps the existing variance along that axis.
fn reset_axis_cov(
    cov: &Matrix3<f64>,
    pose: &Pose2D,
    lat_var: Option<f64>,
    lon_var: Option<f64>,
) -> Matrix3<f64> {
    let r = pose.right();
    let f = pose.forward();
    let p_xy = cov.fixed_view::<2, 2>(0, 0).into_owned();
    let old_lat = (r.transpose() * p_xy * r)[(0, 0)];
    let old_lon = (f.transpose() * p_xy * f)[(0, 0)];
    let new_lat = lat_var.unwrap_or(old_lat);
    let new_lon = lon_var.unwrap_or(old_lon);
    let p_new = new_lat * r * r.transpose() + new_lon * f * f.transpose();
    let mut out = Matrix3::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(&p_new);
    out[(2, 2)] = cov[(2, 2)];
    ensure_psd(&out)
}

/// One-shot lateral correction at tunnel entry. `lamp_world` is a detected
/// lamp mapped to the local plane through the current (erroneous) pose; it is
/// matched to the nearest map lamp, and the pose shifts laterally so that the
/// lamp's predicted lateral offset matches what it would be from the center
/// of the current lane. Only the component perpendicular to the heading
/// moves; the lateral variance resets to (0.3 m)².
pub fn compensate_lateral(
    state: &FilterState,
    lane: u32,
    lamp_world: Vector2<f64>,
    map: &LandmarkMap,
    spec: &TunnelSpec,
    gate: f64,
) -> Result<FilterState, LocError> {
    let best = map
        .landmarks
        .iter()
        .filter(|l| l.kind == FacilityKind::Lamp)
        .map(|l| (l, (l.pos - lamp_world).norm()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let Some((lamp, dist)) = best else {
        return Err(LocError::NoLampMatched);
    };
    if dist > gate {
        return Err(LocError::NoLampMatched);
    }
    let pose = state.mean;
    let (s_lamp, _) = spec.station_of(lamp.pos);
    let p_cl = spec.local_of(s_lamp, spec.lane_center_offset(lane));
    let v_dr = lamp.pos - pose.position();
    let v_cl = lamp.pos - p_cl;
    let d_lateral = v_dr.dot(&pose.right()) - v_cl.dot(&pose.right());
    let dp = d_lateral * pose.right();
    let mean = Pose2D::new(pose.x + dp.x, pose.y + dp.y, pose.psi);
    let cov = reset_axis_cov(&state.cov, &mean, Some(0.3 * 0.3), None);
    Ok(FilterState { mean, cov, mode: state.mode })
}

/// One-shot longitudinal correction at tunnel entry, run after the lateral
/// one. Each detected lane-control signal (already mapped to the local plane
/// through the current pose) is matched to a map LCS; the mean map-minus-
/// detection offset, projected on the heading, shifts the pose along the
/// road. The longitudinal variance resets to (0.5 m)².
pub fn compensate_longitudinal(
    state: &FilterState,
    lcs_world: &[Vector2<f64>],
    map: &LandmarkMap,
    gate: f64,
) -> Result<FilterState, LocError> {
    let dets: Vec<(FacilityKind, Vector2<f64>)> =
        lcs_world.iter().map(|p| (FacilityKind::Lcs, *p)).collect();
    let pairs = associate_landmarks(&dets, map, gate);
    if pairs.is_empty() {
        return Err(LocError::NoLcsDetected);
    }
    let mut v = Vector2::zeros();
    for &(di, li) in &pairs {
        v += map.landmarks[li].pos - dets[di].1;
    }
    v /= pairs.len() as f64;
    let pose = state.mean;
    let lon = v.dot(&pose.forward());
    let dp = lon * pose.forward();
    let mean = Pose2D::new(pose.x + dp.x, pose.y + dp.y, pose.psi);
    let cov = reset_axis_cov(&state.cov, &mean, None, Some(0.5 * 0.5));
    Ok(FilterState { mean, cov, mode: state.mode })
}

// ---------------------------------------------------------------------------
// Step orchestration
// ---------------------------------------------------------------------------

/// Everything the localizer needs beyond the maps.
#[derive(Debug, Clone)]
pub struct LocalizerConfig {
    pub noise: NoiseConfig,
    pub extract: ExtractConfig,
    pub ndt: NdtParams,
    /// Association gate for tracking-mode landmark matching, meters.
    pub landmark_gate: f64,
    /// Association gate during entry compensation, meters; must exceed the
    /// worst plausible GPS/DR error at the portal.
    pub compensation_gate: f64,
    /// Clamp on the per-direction η noise inflation.
    pub eta_max_inflation: f64,
    /// Filter step, seconds (the scan period).
    pub dt: f64,
    /// Disable every in-tunnel correction; the filter dead-reckons through
    /// the tunnel. Baseline for drift comparisons.
    pub dr_only: bool,
    /// Use the lane-marking NDT pseudo-measurement.
    pub use_lane_ndt: bool,
    /// Landmark kinds ignored during tracking (ablation studies).
    pub excluded_kinds: Vec<FacilityKind>,
    /// Test instrumentation: (lateral, longitudinal) error in meters added to
    /// the pose at the entry trigger, to exercise the compensation stage.
    pub entry_error: Option<[f64; 2]>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            extract: ExtractConfig::default(),
            ndt: NdtParams::default(),
            landmark_gate: 2.0,
            compensation_gate: 30.0,
            eta_max_inflation: 100.0,
            dt: 0.1,
            dr_only: false,
            use_lane_ndt: true,
            excluded_kinds: Vec::new(),
            entry_error: None,
        }
    }
}

/// Per-step diagnostics; the step never aborts the stream, it reports
/// failures here instead.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// Mode at the end of the step.
    pub mode_name: &'static str,
    /// Facility detections in the scan, total and per landmark kind in
    /// [`FacilityKind::LANDMARKS`] order.
    pub detections: usize,
    pub kind_detections: [usize; 4],
    /// Points inside those detections, total and per kind.
    pub facility_points: usize,
    pub kind_points: [usize; 4],
    /// Landmark pairs that entered the measurement update.
    pub landmark_pairs: usize,
    /// Lane points matched by NDT.
    pub lane_pairs: usize,
    pub eta_applied: bool,
    pub lane: Option<u32>,
    pub align_ms: f64,
    pub extract_ms: f64,
    pub ndt_ms: f64,
    pub update_ms: f64,
    pub total_ms: f64,
    /// First stage failure of the step, if any.
    pub note: Option<String>,
}

impl StepDiagnostics {
    fn set_note(&mut self, e: impl std::fmt::Display) {
        if self.note.is_none() {
            self.note = Some(e.to_string());
        }
    }
}

/// The sequential localization state machine: one instance per drive, one
/// [`Localizer::step`] per scan frame, strict frame order.
pub struct Localizer {
    spec: TunnelSpec,
    cfg: LocalizerConfig,
    ctx: ExtractContext,
    landmarks: LandmarkMap,
    lanes: LaneDistMap,
    state: FilterState,
    lane: Option<u32>,
    lateral_done: bool,
    longitudinal_done: bool,
}

impl Localizer {
    pub fn new(
        spec: &TunnelSpec,
        rules: &[FacilityRule],
        landmarks: LandmarkMap,
        lanes: LaneDistMap,
        cfg: LocalizerConfig,
        initial: Pose2D,
        initial_cov: Matrix3<f64>,
    ) -> Result<Self, LocError> {
        cfg.noise.validate()?;
        let ctx = ExtractContext::new(spec, rules, cfg.extract.clone());
        Ok(Self {
            spec: *spec,
            cfg,
            ctx,
            landmarks,
            lanes,
            state: FilterState::new(initial, initial_cov),
            lane: None,
            lateral_done: false,
            longitudinal_done: false,
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn lane(&self) -> Option<u32> {
        self.lane
    }

    /// Map a point from the aligned (tunnel cross-section) frame back to the
    /// vehicle frame.
    fn aligned_to_vehicle(alignment: &Alignment, p: Vector3<f64>) -> Vector2<f64> {
        let (s, c) = alignment.yaw.sin_cos();
        let dx = p.x - alignment.lateral;
        Vector2::new(c * dx + s * p.y, -s * dx + c * p.y)
    }

    /// Map an aligned-frame detection to the local plane through the current
    /// pose estimate (so it inherits the pose error, which is what data
    /// association and the compensations expect).
    fn detection_world(&self, alignment: &Alignment, p: Vector3<f64>) -> Vector2<f64> {
        self.state.mean.vehicle_to_local(Self::aligned_to_vehicle(alignment, p))
    }

    /// Advance the filter by one frame. Never panics or aborts on stage
    /// failures; they surface in the returned diagnostics.
    pub fn step(&mut self, frame: &SimFrame) -> StepDiagnostics {
        let t0 = Instant::now();
        let mut diag = StepDiagnostics::default();

        match time_update(&self.state, frame.dr_speed, frame.dr_yaw_rate, self.cfg.dt, &self.cfg.noise.q) {
            Ok(s) => self.state = s,
            Err(e) => diag.set_note(e),
        }

        match self.state.mode {
            LocMode::GpsDr => {
                if let Some(fix) = frame.gps {
                    match gps_update(&self.state, fix, &self.cfg.noise.r_gps) {
                        Ok(s) => self.state = s,
                        Err(e) => diag.set_note(e),
                    }
                } else {
                    self.try_enter(frame, &mut diag);
                }
            }
            LocMode::EntryCompensation => self.compensation_step(frame, &mut diag),
            LocMode::TunnelTracking => {
                if let Some(fix) = frame.gps {
                    // Back in the open: resume GPS fusion.
                    self.state.mode = LocMode::GpsDr;
                    match gps_update(&self.state, fix, &self.cfg.noise.r_gps) {
                        Ok(s) => self.state = s,
                        Err(e) => diag.set_note(e),
                    }
                } else {
                    self.tracking_step(frame, &mut diag);
                }
            }
        }

        diag.mode_name = match self.state.mode {
            LocMode::GpsDr => "gps_dr",
            LocMode::EntryCompensation => "entry_compensation",
            LocMode::TunnelTracking => "tunnel_tracking",
        };
        diag.lane = self.lane;
        diag.total_ms = t0.elapsed().as_secs_f64() * 1e3;
        diag
    }

    /// GPS just dropped out: enter the tunnel stage once the scan confirms
    /// walls on both sides. With corrections disabled there is nothing to
    /// bootstrap, so tracking (which then only dead-reckons) starts at once.
    fn try_enter(&mut self, frame: &SimFrame, diag: &mut StepDiagnostics) {
        if self.cfg.dr_only {
            self.apply_entry_error();
            self.state.mode = LocMode::TunnelTracking;
            return;
        }
        let ext = match extract(&self.ctx, &frame.scan) {
            Ok(e) => e,
            Err(e) => {
                diag.set_note(e);
                return;
            }
        };
        self.fill_extraction_diag(&ext, diag);
        let yawed = yaw_aligned(&ext.aligned, ext.alignment.lateral);
        if let Err(e) = determine_lane(&yawed, &self.spec) {
            diag.set_note(e);
            return;
        }
        self.apply_entry_error();
        self.state.mode = LocMode::EntryCompensation;
        self.run_compensation(&ext, diag);
    }

    fn apply_entry_error(&mut self) {
        if let Some([lat, lon]) = self.cfg.entry_error.take() {
            let pose = self.state.mean;
            let p = pose.position() + lat * pose.right() + lon * pose.forward();
            self.state.mean = Pose2D::new(p.x, p.y, pose.psi);
        }
    }

    fn compensation_step(&mut self, frame: &SimFrame, diag: &mut StepDiagnostics) {
        let ext = match extract(&self.ctx, &frame.scan) {
            Ok(e) => e,
            Err(e) => {
                diag.set_note(e);
                return;
            }
        };
        self.fill_extraction_diag(&ext, diag);
        self.run_compensation(&ext, diag);
    }

    fn run_compensation(&mut self, ext: &crate::extract::Extraction, diag: &mut StepDiagnostics) {
        // Lane first; retry every frame until the lateral correction lands.
        if !self.lateral_done {
            let yawed = yaw_aligned(&ext.aligned, ext.alignment.lateral);
            match determine_lane(&yawed, &self.spec) {
                Ok(l) => self.lane = Some(l),
                Err(e) => diag.set_note(e),
            }
        }

        if !self.lateral_done {
            if let Some(lane) = self.lane {
                // The lamp nearest to abeam gives the cleanest lateral read.
                let lamp = ext
                    .facilities
                    .iter()
                    .filter(|d| d.kind == FacilityKind::Lamp)
                    .min_by(|a, b| a.center.y.abs().partial_cmp(&b.center.y.abs()).unwrap());
                if let Some(d) = lamp {
                    let world = self.detection_world(&ext.alignment, d.center);
                    match compensate_lateral(
                        &self.state,
                        lane,
                        world,
                        &self.landmarks,
                        &self.spec,
                        self.cfg.compensation_gate,
                    ) {
                        Ok(s) => {
                            self.state = s;
                            self.lateral_done = true;
                        }
                        Err(e) => diag.set_note(e),
                    }
                }
            }
        }

        // Longitudinal only once the lateral fix is in; detections are
        // re-projected through the just-corrected pose.
        if self.lateral_done && !self.longitudinal_done {
            let dets: Vec<Vector2<f64>> = ext
                .facilities
                .iter()
                .filter(|d| d.kind == FacilityKind::Lcs)
                .map(|d| self.detection_world(&ext.alignment, d.center))
                .collect();
            if !dets.is_empty() {
                match compensate_longitudinal(
                    &self.state,
                    &dets,
                    &self.landmarks,
                    self.cfg.compensation_gate,
                ) {
                    Ok(s) => {
                        self.state = s;
                        self.longitudinal_done = true;
                    }
                    Err(e) => diag.set_note(e),
                }
            }
        }

        if self.lateral_done && self.longitudinal_done {
            self.state.mode = LocMode::TunnelTracking;
        }
    }

    fn tracking_step(&mut self, frame: &SimFrame, diag: &mut StepDiagnostics) {
        if self.cfg.dr_only {
            return;
        }
        let ext = match extract(&self.ctx, &frame.scan) {
            Ok(e) => e,
            Err(e) => {
                diag.set_note(e);
                return;
            }
        };
        self.fill_extraction_diag(&ext, diag);

        let mut bundle = MeasurementBundle::default();

        if self.cfg.use_lane_ndt && ext.lane_points.len() >= self.cfg.ndt.min_points {
            let t0 = Instant::now();
            let pts: Vec<Vector2<f64>> = ext
                .lane_points
                .iter()
                .map(|p| {
                    self.state.mean.vehicle_to_local(Self::aligned_to_vehicle(&ext.alignment, *p))
                })
                .collect();
            match ndt_match(&pts, &self.lanes, self.state.mean.position(), &self.cfg.ndt) {
                Ok(res) if res.correction.converged => {
                    let c = res.correction;
                    bundle.eta = Some(Pose2D::new(
                        self.state.mean.x + c.dx,
                        self.state.mean.y + c.dy,
                        wrap_angle(self.state.mean.psi + c.dpsi),
                    ));
                    bundle.eta_noise = Some(eta_noise_from_hessian(
                        &self.cfg.noise.r_eta,
                        &res.hessian,
                        self.cfg.eta_max_inflation,
                    ));
                    diag.lane_pairs = res.n_pairs;
                    diag.eta_applied = true;
                }
                Ok(_) => {}
                Err(e) => diag.set_note(e),
            }
            diag.ndt_ms = t0.elapsed().as_secs_f64() * 1e3;
        }

        let dets: Vec<(FacilityKind, Vector2<f64>)> = ext
            .facilities
            .iter()
            .filter(|d| !self.cfg.excluded_kinds.contains(&d.kind))
            .map(|d| (d.kind, self.detection_world(&ext.alignment, d.center)))
            .collect();
        let matched = associate_landmarks(&dets, &self.landmarks, self.cfg.landmark_gate);
        for (di, li) in matched {
            let p_veh = Self::aligned_to_vehicle(&ext.alignment, ext.facilities[di].center);
            let r = p_veh.norm();
            if r < 0.5 {
                continue;
            }
            // Bearing relative to the heading: forward is +y in the vehicle
            // frame, bearings positive to the left.
            let beta = (-p_veh.x).atan2(p_veh.y);
            bundle.pairs.push(RangeBearing {
                r,
                beta,
                landmark: self.landmarks.landmarks[li].pos,
            });
        }
        diag.landmark_pairs = bundle.pairs.len();

        if !bundle.is_empty() {
            let t0 = Instant::now();
            match measurement_update(&self.state, &bundle, &self.cfg.noise) {
                Ok(s) => self.state = s,
                Err(e) => diag.set_note(e),
            }
            diag.update_ms = t0.elapsed().as_secs_f64() * 1e3;
        }
    }

    fn fill_extraction_diag(&self, ext: &crate::extract::Extraction, diag: &mut StepDiagnostics) {
        diag.align_ms = ext.timings.align_ms;
        diag.extract_ms = ext.timings.total_ms;
        diag.detections = ext.facilities.len();
        for d in &ext.facilities {
            diag.facility_points += d.point_count;
            if let Some(i) = FacilityKind::LANDMARKS.iter().position(|k| *k == d.kind) {
                diag.kind_detections[i] += 1;
                diag.kind_points[i] += d.point_count;
            }
        }
    }
}

/// Undo the lateral re-centering of an aligned scan, leaving a scan that is
/// yaw-aligned to the tunnel axis but still centered on the vehicle — the
/// frame lane determination works in.
fn yaw_aligned(aligned: &Scan, lateral: f64) -> Scan {
    Scan {
        points: aligned
            .points
            .iter()
            .map(|p| crate::sim::ScanPoint {
                pos: Vector3::new(p.pos.x - lateral, p.pos.y, p.pos.z),
                intensity: p.intensity,
            })
            .collect(),
    }
}
