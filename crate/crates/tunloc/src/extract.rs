//! Facility point extraction: turns one LIDAR scan into tunnel-facility
//! center points and lane-marking points.
//!
//! The stages mirror how a tunnel constrains the problem. First the scan is
//! rigidly aligned to a virtual elliptical cylinder (lateral shift + azimuth
//! are the only observable mismatches inside an extruded ellipse). Then the
//! wall shell itself is removed analytically: a point survives only if it
//! lies more than a margin inside the ideal ellipse at its cross-section
//! angle. What remains in the regulated mounting bands — low on the left
//! wall, mid-height on the right wall, under the ceiling — is clustered into
//! facility detections. Lane markings fall out separately by intensity.

use crate::registration::{icp_with_target_tree, IcpDof, IcpParams, KdTree, RegError};
use crate::sim::{Scan, ScanPoint};
use crate::tunnel::{virtual_cylinder, FacilityKind, FacilityRule, Mount, TunnelSpec};
use nalgebra::Vector3;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no tunnel wall in view ({wall_points} usable wall points)")]
    NotInTunnel { wall_points: usize },
    #[error("wall alignment out of bounds: lateral {lateral:.2} m, yaw {yaw_deg:.1} deg")]
    AlignOutOfBounds { lateral: f64, yaw_deg: f64 },
    #[error(transparent)]
    Registration(#[from] RegError),
}

// ---------------------------------------------------------------------------
// Wall filter
// ---------------------------------------------------------------------------

/// The elliptical wall-removal test: a point at cross-section angle θ is
/// wall if its ellipse value reaches the threshold traced by an ellipse
/// shrunk by the wall margin.
#[derive(Debug, Clone, Copy)]
pub struct WallFilter {
    pub a: f64,
    pub b: f64,
    pub wall_margin: f64,
}

impl WallFilter {
    pub fn new(spec: &TunnelSpec, wall_margin: f64) -> Self {
        Self { a: spec.a, b: spec.b, wall_margin }
    }

    /// Ellipse value x²/a² + z²/b²: 1 on the ideal wall, < 1 inside.
    pub fn ellipse_value(&self, x: f64, z: f64) -> f64 {
        (x / self.a).powi(2) + (z / self.b).powi(2)
    }

    /// Threshold at cross-section angle θ for an ellipse shrunk by `margin`
    /// (negative margins grow it).
    pub fn threshold_at(&self, theta: f64, margin: f64) -> f64 {
        let at = (self.a - margin).max(0.0);
        let bt = (self.b - margin).max(0.0);
        let (s, c) = theta.sin_cos();
        (at * c / self.a).powi(2) + (bt * s / self.b).powi(2)
    }

    /// Whether a point survives wall removal (strictly inside the margin).
    pub fn retains(&self, x: f64, z: f64) -> bool {
        self.ellipse_value(x, z) < self.threshold_at(z.atan2(x), self.wall_margin)
    }
}

/// Keep points whose ellipse value falls within ±`band` (in ellipse-axis
/// meters) of the ideal wall. Includes the whole shell: walls, ceiling, and
/// whatever is mounted within the band.
pub fn sample_near_wall(scan: &Scan, filter: &WallFilter, band: f64) -> Scan {
    if !band.is_finite() {
        return scan.clone();
    }
    let points = scan
        .points
        .iter()
        .filter(|p| {
            let theta = p.pos.z.atan2(p.pos.x);
            let e = filter.ellipse_value(p.pos.x, p.pos.z);
            e >= filter.threshold_at(theta, band) && e <= filter.threshold_at(theta, -band)
        })
        .copied()
        .collect();
    Scan { points }
}

/// Remove the tunnel wall shell from an aligned scan: keep a point only if
/// it sits strictly inside the margin-shrunk ellipse at its angle.
pub fn remove_wall(scan: &Scan, filter: &WallFilter) -> Scan {
    Scan { points: scan.points.iter().filter(|p| filter.retains(p.pos.x, p.pos.z)).copied().collect() }
}

// ---------------------------------------------------------------------------
// Configuration & context
// ---------------------------------------------------------------------------

/// Height bands (meters above road) that regulated mounts occupy.
#[derive(Debug, Clone, Copy)]
pub struct RoiBands {
    pub lamp: (f64, f64),
    pub exit_light: (f64, f64),
    pub ceiling: (f64, f64),
    /// Everything at or above this is ventilation/lighting clutter.
    pub discard_above: f64,
}

impl Default for RoiBands {
    fn default() -> Self {
        // The ceiling band spans the panel faces: its floor is the lowest
        // face a panel mount presents, its top stops just under the jet-fan
        // axis (5.5 m) so fan bellies mostly stay out of the bucket.
        Self { lamp: (2.3, 3.2), exit_light: (1.3, 2.2), ceiling: (4.85, 5.45), discard_above: 5.8 }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    /// Wall-removal margin, meters.
    pub wall_margin: f64,
    /// Near-wall sampling band, meters.
    pub band: f64,
    /// Sampling band for the alignment stage. Wider than `band`: the scan is
    /// still in the vehicle frame there, so the shell must cover a whole
    /// lane of lateral offset or an off-axis vehicle loses both walls.
    pub align_band: f64,
    /// Alignment uses wall points at/above this height (floor returns carry
    /// no cross-section shape).
    pub align_min_z: f64,
    /// Alignment window along the vehicle axis, meters each way — the
    /// virtual cylinder's half-span.
    pub align_window: f64,
    /// Alignment sample cap (uniform stride).
    pub align_max_points: usize,
    /// Minimum usable wall points before declaring "not in tunnel".
    pub align_min_points: usize,
    /// ICP correspondence gate for alignment, meters.
    pub align_max_corr: f64,
    /// Allow the full planar transform instead of lateral + yaw.
    pub align_full_planar: bool,
    pub roi: RoiBands,
    /// Lane-marking intensity threshold.
    pub intensity_threshold: f64,
    /// Lane points must satisfy |z| ≤ this, meters.
    pub lane_height_band: f64,
    pub lane_max_points: usize,
    /// Clusters below this size are noise.
    pub min_cluster: usize,
    /// A longitudinal gap wider than this starts a new cluster segment;
    /// smaller than any co-bucket installation spacing, larger than one box.
    pub segment_gap: f64,
    /// Accepted bbox extent ≤ (1 + tol) · expected + pad, per axis.
    pub bbox_tol: f64,
    pub bbox_pad: f64,
    /// Ceiling cluster counts as a lane-control signal iff its lateral
    /// center is within this of a lane center, meters.
    pub lcs_lane_gate: f64,
    /// Ceiling cluster counts as an exit sign iff its lateral center is
    /// within this of the sign mount line, meters; others are clutter.
    pub sign_lane_gate: f64,
    /// Same-kind detections closer than this are one installation split
    /// across LIDAR rows; keep it under the closest real same-kind spacing.
    pub merge_radius: f64,
    /// Fall back to a single cluster when the best silhouette is below this.
    pub silhouette_min: f64,
    /// A detection must show at least this much vertical extent: a credible
    /// facility presents a face, not a single scan row grazing it at range.
    pub min_face_height: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            wall_margin: 0.10,
            band: 0.5,
            align_band: 4.5,
            align_min_z: 0.5,
            align_window: 20.0,
            align_max_points: 1500,
            align_min_points: 50,
            align_max_corr: 1.5,
            align_full_planar: false,
            roi: RoiBands::default(),
            intensity_threshold: 100.0,
            lane_height_band: 0.3,
            lane_max_points: 500,
            min_cluster: 3,
            segment_gap: 8.0,
            bbox_tol: 0.5,
            bbox_pad: 0.3,
            lcs_lane_gate: 0.45,
            sign_lane_gate: 1.2,
            merge_radius: 1.5,
            // Panels of one row split at ~0.8+; splitting the uniform strip
            // of a single face scores ~0.6, which must fall back to one
            // cluster.
            silhouette_min: 0.7,
            min_face_height: 0.10,
        }
    }
}

/// Precomputed per-tunnel extraction state: the wall filter, the virtual
/// cylinder (as ICP target), and per-kind size/interval expectations.
pub struct ExtractContext {
    pub spec: TunnelSpec,
    pub cfg: ExtractConfig,
    pub filter: WallFilter,
    cylinder: Vec<Vector3<f64>>,
    cylinder_tree: KdTree<3>,
    /// Ring spacing of the virtual cylinder along the tunnel axis, meters.
    ring_pitch: f64,
    /// (kind, expected extents (lateral, forward, up))
    kind_info: Vec<(FacilityKind, [f64; 3])>,
    /// Lateral mount line of the exit signs, if the rules install any.
    sign_u: Option<f64>,
}

impl ExtractContext {
    pub fn new(spec: &TunnelSpec, rules: &[FacilityRule], cfg: ExtractConfig) -> Self {
        let filter = WallFilter::new(spec, cfg.wall_margin);
        // Ring pitch well under the correspondence gate keeps the
        // nearest-neighbor quantization bias below a millimeter.
        let ring_pitch = 0.25;
        let cylinder = virtual_cylinder(spec.a, spec.b, 2.0 * cfg.align_window, ring_pitch, 1.25);
        let cylinder_tree = KdTree::<3>::build(cylinder.iter().map(|p| [p.x, p.y, p.z]).collect());
        let kind_info: Vec<_> = rules.iter().map(|r| (r.kind, r.extents())).collect();
        let sign_u = rules.iter().find(|r| r.kind == FacilityKind::ExitSign).and_then(|r| {
            match r.mount {
                Mount::CeilingAt { u } => Some(u),
                _ => None,
            }
        });
        Self { spec: spec.clone(), cfg, filter, cylinder, cylinder_tree, ring_pitch, kind_info, sign_u }
    }

    fn extents_of(&self, kind: FacilityKind) -> [f64; 3] {
        self.kind_info
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, e)| *e)
            .unwrap_or([1.0, 1.0, 1.0])
    }
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// The recovered scan-to-tunnel transform and its residual history.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    /// Lateral shift applied to the scan, meters. Centered driving gives ≈ 0;
    /// driving left of the axis gives a negative shift... the sign is pinned
    /// by the tests: it equals the vehicle's own signed lateral offset.
    pub lateral: f64,
    /// Yaw applied to the scan, radians: the vehicle's heading relative to
    /// the tunnel axis.
    pub yaw: f64,
    pub rms_before: f64,
    pub rms_after: f64,
    pub corr_fraction: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { lateral: 0.0, yaw: 0.0, rms_before: 0.0, rms_after: 0.0, corr_fraction: 0.0 }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * p.x - s * p.y + self.lateral, s * p.x + c * p.y, p.z)
    }
}

/// Align a raw scan to the tunnel cross-section frame by ICP against the
/// virtual elliptical cylinder. Returns the transform and the fully
/// transformed scan.
pub fn align_to_tunnel(ctx: &ExtractContext, scan: &Scan) -> Result<(Alignment, Scan), ExtractError> {
    let near = sample_near_wall(scan, &ctx.filter, ctx.cfg.align_band);
    let mut sample: Vec<Vector3<f64>> = near
        .points
        .iter()
        .filter(|p| p.pos.z >= ctx.cfg.align_min_z && p.pos.y.abs() <= ctx.cfg.align_window)
        .map(|p| p.pos)
        .collect();
    if sample.len() < ctx.cfg.align_min_points {
        return Err(ExtractError::NotInTunnel { wall_points: sample.len() });
    }
    if sample.len() > ctx.cfg.align_max_points {
        let stride = sample.len().div_ceil(ctx.cfg.align_max_points);
        sample = sample.into_iter().step_by(stride).collect();
    }
    let dof = if ctx.cfg.align_full_planar { IcpDof::PlanarYaw } else { IcpDof::LateralYaw };
    let params = IcpParams { max_corr_dist: ctx.cfg.align_max_corr, ..IcpParams::default() };

    // Stage 0: closed-form lateral seed. The midpoint of the walls' lateral
    // spread estimates the vehicle offset directly (the common wall width
    // cancels), putting a whole-lane displacement inside the ICP gate, which
    // point-to-point iteration alone cannot be trusted to cross.
    let mut xs: Vec<f64> =
        sample.iter().filter(|p| p.z <= 3.0).map(|p| p.x).collect();
    let seed = if xs.len() >= ctx.cfg.align_min_points {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = xs[xs.len() * 2 / 100];
        let hi = xs[xs.len() * 98 / 100];
        -(lo + hi) / 2.0
    } else {
        0.0
    };
    let shifted: Vec<Vector3<f64>> =
        sample.iter().map(|p| Vector3::new(p.x + seed, p.y, p.z)).collect();

    // Stage 1: capture — plain ICP finishes the pull from the seeded pose.
    let res1 =
        icp_with_target_tree(&shifted, &ctx.cylinder, &ctx.cylinder_tree, dof, &params)?;

    // Stage 2: de-bias — near identity, snapping the axial coordinate onto
    // the ring grid zeroes the along-axis correspondence residuals whose
    // sampling asymmetry otherwise torques the yaw estimate.
    let mut refined: Vec<Vector3<f64>> = shifted.iter().map(|p| res1.apply(*p)).collect();
    for p in &mut refined {
        p.y = (p.y / ctx.ring_pitch).round() * ctx.ring_pitch;
    }
    // Each candidate folded into one (lateral, yaw) pair over the original
    // sample; the seed shift rides inside the later rotations, and the
    // spurious axial component is projected out (the cylinder carries no
    // along-axis information anyway).
    let cand1 = (seed * res1.psi.cos() + res1.tx, res1.psi);
    let cand2 = icp_with_target_tree(&refined, &ctx.cylinder, &ctx.cylinder_tree, dof, &params)
        .ok()
        .map(|res2| {
            let yaw = res1.psi + res2.psi;
            (seed * yaw.cos() + res1.tx * res2.psi.cos() + res2.tx, yaw)
        });

    // Prefer the de-biased composition, then the capture stage, then doing
    // nothing — first candidate that strictly beats the untransformed
    // residual wins. (Not min-RMS: the raw metric's own minimum sits at the
    // biased pose, which is what stage 2 exists to escape.)
    let rms_before = alignment_rms(ctx, &sample, 0.0, 0.0, params.max_corr_dist);
    let mut alignment = Alignment {
        rms_before,
        rms_after: rms_before,
        corr_fraction: res1.corr_fraction,
        ..Alignment::identity()
    };
    for (lateral, yaw) in cand2.into_iter().chain(std::iter::once(cand1)) {
        let rms = alignment_rms(ctx, &sample, lateral, yaw, params.max_corr_dist);
        if rms < rms_before {
            alignment = Alignment {
                lateral,
                yaw,
                rms_before,
                rms_after: rms,
                corr_fraction: res1.corr_fraction,
            };
            break;
        }
    }

    if alignment.lateral.abs() > 2.0 * ctx.spec.lane_width
        || alignment.yaw.abs() > 15.0_f64.to_radians()
    {
        return Err(ExtractError::AlignOutOfBounds {
            lateral: alignment.lateral,
            yaw_deg: alignment.yaw.to_degrees(),
        });
    }
    let points = scan
        .points
        .iter()
        .map(|p| ScanPoint { pos: alignment.apply(p.pos), intensity: p.intensity })
        .collect();
    Ok((alignment, Scan { points }))
}

/// Gated nearest-neighbor RMS of the transformed sample against the virtual
/// cylinder, with the axial coordinate snapped onto the ring grid: the
/// common yardstick for ranking alignment candidates. Snapping makes the
/// metric's minimum sit at the unbiased pose instead of wherever the ring
/// discretization happens to pull it.
fn alignment_rms(
    ctx: &ExtractContext,
    sample: &[Vector3<f64>],
    lateral: f64,
    yaw: f64,
    gate: f64,
) -> f64 {
    let al = Alignment { lateral, yaw, ..Alignment::identity() };
    let gate2 = gate * gate;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in sample {
        let mut q = al.apply(*p);
        q.y = (q.y / ctx.ring_pitch).round() * ctx.ring_pitch;
        if let Some((_, d2)) = ctx.cylinder_tree.nearest(&[q.x, q.y, q.z]) {
            if d2 <= gate2 {
                sum += d2;
                n += 1;
            }
        }
    }
    if n == 0 { f64::INFINITY } else { (sum / n as f64).sqrt() }
}

// ---------------------------------------------------------------------------
// ROI classification
// ---------------------------------------------------------------------------

/// Wall-removed points, partitioned by mounting band.
#[derive(Debug, Clone, Default)]
pub struct RoiBuckets {
    pub lamp: Scan,
    pub exit_light: Scan,
    pub ceiling: Scan,
}

/// Partition wall-removed points into the mounting-band buckets. Side gates
/// keep traffic out: lamps live beyond the lanes on the right, exit lights
/// beyond them on the left. Points in no band are dropped.
pub fn classify_roi(scan: &Scan, spec: &TunnelSpec, bands: &RoiBands) -> RoiBuckets {
    let half_span = spec.half_span();
    let mut buckets = RoiBuckets::default();
    for p in &scan.points {
        let (x, z) = (p.pos.x, p.pos.z);
        if z >= bands.discard_above {
            continue;
        }
        if z >= bands.lamp.0 && z <= bands.lamp.1 && x > half_span {
            buckets.lamp.points.push(*p);
        } else if z >= bands.exit_light.0 && z <= bands.exit_light.1 && x < -half_span {
            buckets.exit_light.points.push(*p);
        } else if z >= bands.ceiling.0 && z <= bands.ceiling.1 {
            buckets.ceiling.points.push(*p);
        }
    }
    buckets
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// One clustered facility in the aligned vehicle frame.
#[derive(Debug, Clone, Copy)]
pub struct FacilityDetection {
    pub kind: FacilityKind,
    pub center: Vector3<f64>,
    pub point_count: usize,
    /// Cluster extents along (lateral, forward, up).
    pub bbox: [f64; 3],
}

/// Deterministic k-means: farthest-first seeding, Lloyd iterations to a
/// fixed point. Returns per-point cluster indices.
fn kmeans(pts: &[Vector3<f64>], k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= pts.len());
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(k);
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let first = pts
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1 - mean).norm_squared();
            let db = (b.1 - mean).norm_squared();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    centers.push(pts[first]);
    while centers.len() < k {
        let far = pts
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| (a.1 - c).norm_squared()).fold(f64::MAX, f64::min);
                let db = centers.iter().map(|c| (b.1 - c).norm_squared()).fold(f64::MAX, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        centers.push(pts[far]);
    }
    let mut assign = vec![0usize; pts.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (p - a.1).norm_squared();
                    let db = (p - b.1).norm_squared();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(c, _)| c)
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, p) in pts.iter().enumerate() {
            sums[assign[i]] += p;
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
    }
    assign
}

/// Mean silhouette score of a clustering, subsampled for cost. 1 means tight,
/// well-separated clusters; ≤ 0 means the split is not believable.
fn silhouette(pts: &[Vector3<f64>], assign: &[usize], k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    let counts = {
        let mut c = vec![0usize; k];
        for &a in assign {
            c[a] += 1;
        }
        c
    };
    let stride = pts.len().div_ceil(300).max(1);
    let mut total = 0.0;
    let mut n = 0usize;
    for i in (0..pts.len()).step_by(stride) {
        let ci = assign[i];
        if counts[ci] <= 1 {
            continue; // singleton: silhouette defined as 0, skip
        }
        let mut sums = vec![0.0f64; k];
        for (j, p) in pts.iter().enumerate() {
            sums[assign[j]] += (pts[i] - p).norm();
        }
        let a = sums[ci] / (counts[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

fn cluster_bucket(
    ctx: &ExtractContext,
    scan: &Scan,
    bucket_kind: Option<FacilityKind>, // None = ceiling (kind decided per cluster)
    out: &mut Vec<FacilityDetection>,
) {
    let mut pts: Vec<Vector3<f64>> = scan.points.iter().map(|p| p.pos).collect();
    if pts.len() < ctx.cfg.min_cluster {
        return;
    }
    // Installations sit tens of meters apart along the tunnel while the
    // panels of one row sit side by side, so split at longitudinal gaps
    // first: a distant installation must not drag k-means centroids away
    // from the lateral structure of a nearby row.
    pts.sort_by(|a, b| a.y.total_cmp(&b.y));
    let mut start = 0;
    for i in 1..=pts.len() {
        if i < pts.len() && pts[i].y - pts[i - 1].y <= ctx.cfg.segment_gap {
            continue;
        }
        let seg = &pts[start..i];
        start = i;
        if seg.len() >= ctx.cfg.min_cluster {
            cluster_segment(ctx, seg, bucket_kind, out);
        }
    }
}

/// Silhouette-selected k-means inside one longitudinal segment. A segment is
/// one station row, so at most one panel per lane shares it.
fn cluster_segment(
    ctx: &ExtractContext,
    seg: &[Vector3<f64>],
    bucket_kind: Option<FacilityKind>,
    out: &mut Vec<FacilityDetection>,
) {
    // A segment too small to hold two valid clusters is one installation.
    let k_max = if seg.len() < 2 * ctx.cfg.min_cluster {
        1
    } else {
        (ctx.spec.lane_count as usize + 1).min(seg.len())
    };
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    for k in 2..=k_max {
        let assign = kmeans(seg, k);
        let sil = silhouette(seg, &assign, k);
        if best.as_ref().is_none_or(|(s, _, _)| sil > *s) {
            best = Some((sil, assign, k));
        }
    }
    let (assign, k) = match best {
        Some((sil, assign, k)) if sil >= ctx.cfg.silhouette_min => (assign, k),
        _ => (vec![0usize; seg.len()], 1),
    };

    for c in 0..k {
        let members: Vec<&Vector3<f64>> =
            seg.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
        if members.len() < ctx.cfg.min_cluster {
            continue;
        }
        let center = members.iter().copied().sum::<Vector3<f64>>() / members.len() as f64;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &members {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let bbox = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
        let kind = match bucket_kind {
            Some(kind) => kind,
            None => {
                let near_lane_center = (1..=ctx.spec.lane_count).any(|lane| {
                    (center.x - ctx.spec.lane_center_offset(lane)).abs() <= ctx.cfg.lcs_lane_gate
                });
                let near_sign_line = ctx
                    .sign_u
                    .is_some_and(|u| (center.x - u).abs() <= ctx.cfg.sign_lane_gate);
                if near_lane_center {
                    FacilityKind::Lcs
                } else if near_sign_line {
                    FacilityKind::ExitSign
                } else {
                    // Only two mapped kinds hang from the ceiling; anything
                    // off both mount lines (jet-fan bellies, stray rows) is
                    // clutter.
                    continue;
                }
            }
        };
        let expected = ctx.extents_of(kind);
        let fits = (0..3)
            .all(|i| bbox[i] <= (1.0 + ctx.cfg.bbox_tol) * expected[i] + ctx.cfg.bbox_pad);
        // A real mount's centroid sits strictly inside the wall margin.
        let inside = ctx.filter.retains(center.x, center.z);
        if fits && inside {
            out.push(FacilityDetection { kind, center, point_count: members.len(), bbox });
        }
    }
}

/// Cluster the ROI buckets into facility detections: silhouette-selected
/// k-means per bucket, then size and position acceptance tests.
pub fn cluster_facilities(ctx: &ExtractContext, buckets: &RoiBuckets) -> Vec<FacilityDetection> {
    let mut raw = Vec::new();
    cluster_bucket(ctx, &buckets.lamp, Some(FacilityKind::Lamp), &mut raw);
    cluster_bucket(ctx, &buckets.exit_light, Some(FacilityKind::ExitLight), &mut raw);
    cluster_bucket(ctx, &buckets.ceiling, None, &mut raw);
    raw.sort_by(|a, b| {
        (a.kind.name(), a.center.y).partial_cmp(&(b.kind.name(), b.center.y)).unwrap()
    });
    // One installation can split across LIDAR rows at close range; fold
    // same-kind detections closer than real installations ever sit.
    let mut out: Vec<FacilityDetection> = Vec::new();
    for d in raw {
        match out.iter_mut().rev().find(|m| {
            m.kind == d.kind && (m.center - d.center).norm() <= ctx.cfg.merge_radius
        }) {
            Some(m) => {
                for i in 0..3 {
                    let lo = (m.center[i] - m.bbox[i] / 2.0).min(d.center[i] - d.bbox[i] / 2.0);
                    let hi = (m.center[i] + m.bbox[i] / 2.0).max(d.center[i] + d.bbox[i] / 2.0);
                    m.bbox[i] = hi - lo;
                }
                let (wm, wd) = (m.point_count as f64, d.point_count as f64);
                m.center = (m.center * wm + d.center * wd) / (wm + wd);
                m.point_count += d.point_count;
            }
            None => out.push(d),
        }
    }
    // The extent test runs after merging so a face split across parts is
    // judged whole; what still reads as a sliver is a grazing return.
    out.retain(|d| d.bbox[2] >= ctx.cfg.min_face_height);
    out
}

// ---------------------------------------------------------------------------
// Lane points
// ---------------------------------------------------------------------------

/// Ground returns bright enough to be paint, downsampled by uniform stride.
pub fn extract_lane_points(scan: &Scan, intensity_threshold: f64, height_band: f64) -> Scan {
    let picked: Vec<ScanPoint> = scan
        .points
        .iter()
        .filter(|p| p.pos.z.abs() <= height_band && p.intensity > intensity_threshold)
        .copied()
        .collect();
    let stride = picked.len().div_ceil(500).max(1);
    Scan { points: picked.into_iter().step_by(stride).collect() }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractTimings {
    pub align_ms: f64,
    pub wall_ms: f64,
    pub cluster_ms: f64,
    pub total_ms: f64,
}

/// Everything one scan yields, in the aligned (tunnel cross-section) frame.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub alignment: Alignment,
    /// The full scan after alignment; x is the tunnel lateral coordinate.
    pub aligned: Scan,
    pub facilities: Vec<FacilityDetection>,
    pub lane_points: Vec<Vector3<f64>>,
    pub timings: ExtractTimings,
}

/// Run the full extraction pipeline on one raw scan.
pub fn extract(ctx: &ExtractContext, scan: &Scan) -> Result<Extraction, ExtractError> {
    let t0 = Instant::now();
    let (alignment, aligned) = align_to_tunnel(ctx, scan)?;
    let t1 = Instant::now();
    let removed = remove_wall(&aligned, &ctx.filter);
    let buckets = classify_roi(&removed, &ctx.spec, &ctx.cfg.roi);
    let t2 = Instant::now();
    let facilities = cluster_facilities(ctx, &buckets);
    let t3 = Instant::now();
    let lane_points = extract_lane_points(&aligned, ctx.cfg.intensity_threshold, ctx.cfg.lane_height_band)
        .points
        .iter()
        .take(ctx.cfg.lane_max_points)
        .map(|p| p.pos)
        .collect();
    let t4 = Instant::now();
    Ok(Extraction {
        alignment,
        aligned,
        facilities,
        lane_points,
        timings: ExtractTimings {
            align_ms: (t1 - t0).as_secs_f64() * 1e3,
            wall_ms: (t2 - t1).as_secs_f64() * 1e3,
            cluster_ms: (t3 - t2).as_secs_f64() * 1e3,
            total_ms: (t4 - t0).as_secs_f64() * 1e3,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;
    use crate::sim::{raycast_scan, LidarModel, World};
    use crate::tunnel::default_rules;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn test_lidar() -> LidarModel {
        LidarModel { h_res_deg: 0.5, range_noise_sigma: 0.0, ..LidarModel::default() }
    }

    /// Full-resolution noiseless sensor: facility faces at 25–50 m subtend
    /// only a few tenths of a degree, so cluster tests need the real pitch.
    fn fine_lidar() -> LidarModel {
        LidarModel { range_noise_sigma: 0.0, ..LidarModel::default() }
    }

    /// Zero-noise scan from station `s`, lateral offset `u`, heading offset
    /// `dpsi` against the tunnel tangent.
    fn scan_at(world: &World, s: f64, u: f64, dpsi: f64, lidar: &LidarModel) -> Scan {
        let tangent = world.spec.pose_at(s);
        let pos = world.spec.local_of(s, u);
        let truth = Pose2D::new(pos.x, pos.y, tangent.psi + dpsi);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        raycast_scan(world, truth, lidar, &[], &mut rng)
    }

    fn bare_world() -> World {
        World::new(TunnelSpec::default(), &[], 1, 0.0).unwrap()
    }

    fn default_ctx() -> ExtractContext {
        ExtractContext::new(&TunnelSpec::default(), &default_rules(), ExtractConfig::default())
    }

    #[test]
    fn near_wall_infinite_band_is_identity_and_empty_is_empty() {
        let world = bare_world();
        let scan = scan_at(&world, 300.0, 0.0, 0.0, &test_lidar());
        let filter = WallFilter::new(&world.spec, 0.12);
        let all = sample_near_wall(&scan, &filter, f64::INFINITY);
        assert_eq!(all.points.len(), scan.points.len());
        let none = sample_near_wall(&Scan::default(), &filter, 0.5);
        assert!(none.points.is_empty());
    }

    #[test]
    fn near_wall_band_keeps_wall_points_and_cuts_interior() {
        let world = bare_world();
        let scan = scan_at(&world, 300.0, 0.0, 0.0, &test_lidar());
        let filter = WallFilter::new(&world.spec, 0.12);
        let near = sample_near_wall(&scan, &filter, 0.5);
        // Every off-ground point (wall surface in a bare world) survives...
        let walls = scan.points.iter().filter(|p| p.pos.z > 0.1).count();
        let kept_walls = near.points.iter().filter(|p| p.pos.z > 0.1).count();
        assert_eq!(walls, kept_walls);
        // ...while center-road ground points are gone.
        assert!(near.points.iter().all(|p| p.pos.z > 0.1 || p.pos.x.abs() > 5.0));
        let frac = near.points.len() as f64 / scan.points.len() as f64;
        // Horizon-packed beams put most returns on the walls, so the band
        // trims the scan rather than decimating it.
        assert!(frac < 0.85, "near-wall fraction {frac:.2} unexpectedly high");
    }

    #[test]
    fn align_identity_on_centered_scan() {
        let world = bare_world();
        let ctx = default_ctx();
        let scan = scan_at(&world, 300.0, 0.0, 0.0, &test_lidar());
        let (al, _) = align_to_tunnel(&ctx, &scan).unwrap();
        assert!(al.lateral.abs() < 2e-3, "lateral {} not identity", al.lateral);
        assert!(al.yaw.abs() < 1e-4, "yaw {} not identity", al.yaw);
    }

    #[test]
    fn align_recovers_offset_and_yaw() {
        let world = bare_world();
        let ctx = default_ctx();
        let dpsi = 3.0_f64.to_radians();
        let scan = scan_at(&world, 300.0, 0.8, dpsi, &test_lidar());
        let (al, aligned) = align_to_tunnel(&ctx, &scan).unwrap();
        assert!((al.lateral - 0.8).abs() < 0.05, "lateral {} vs 0.8", al.lateral);
        assert!((al.yaw.abs() - dpsi).abs() < 0.3_f64.to_radians(), "yaw {}", al.yaw);
        // Wall "thickness" (std of ellipse values of wall-height points)
        // strictly decreases after alignment.
        let filter = &ctx.filter;
        let std_of = |scan: &Scan| {
            let es: Vec<f64> = scan
                .points
                .iter()
                .filter(|p| p.pos.z > 0.5)
                .map(|p| filter.ellipse_value(p.pos.x, p.pos.z))
                .collect();
            let m = es.iter().sum::<f64>() / es.len() as f64;
            (es.iter().map(|e| (e - m).powi(2)).sum::<f64>() / es.len() as f64).sqrt()
        };
        assert!(
            std_of(&aligned) < std_of(&scan),
            "alignment did not tighten the wall shell"
        );
        assert!(al.rms_after < al.rms_before);
    }

    #[test]
    fn align_without_walls_is_not_in_tunnel() {
        // Approach road far from the portal: all wall hits are beyond the
        // alignment window, so only ground remains.
        let world = bare_world();
        let ctx = default_ctx();
        let scan = scan_at(&world, -300.0, 0.0, 0.0, &test_lidar());
        match align_to_tunnel(&ctx, &scan) {
            Err(ExtractError::NotInTunnel { .. }) => {}
            other => panic!("expected NotInTunnel, got {other:?}"),
        }
    }

    #[test]
    fn remove_wall_boundary_point_with_zero_margin() {
        let filter = WallFilter { a: 7.0, b: 6.8, wall_margin: 0.0 };
        // Exactly on the ellipse: threshold is 1, strict < fails → removed.
        let x = 7.0 * 0.6;
        let z = 6.8 * 0.8;
        assert_relative_eq!(filter.ellipse_value(x, z), 1.0, epsilon = 1e-12);
        assert!(!filter.retains(x, z));
        // Nudged inward: retained.
        assert!(filter.retains(x * 0.99, z * 0.99));
    }

    #[test]
    fn remove_wall_keeps_facility_faces_and_strips_walls() {
        let filter = WallFilter { a: 7.0, b: 6.8, wall_margin: 0.10 };
        // Lamp face: protrudes 0.22 m from the right wall at z = 2.75.
        let wall_x = 7.0 * (1.0 - (2.75f64 / 6.8) * (2.75 / 6.8)).sqrt();
        assert!(filter.retains(wall_x - 0.22, 2.75), "lamp face removed");
        // Exit-light face: the bracket stands it 0.04 m off the wall at the
        // mount height, inside the margin — the panel center goes out with
        // the wall. But the wall keeps bowing outward below the mount while
        // the flat panel does not follow it, so the bottom rows stand clear.
        let face = 7.0 * (1.0 - (1.75f64 / 6.8) * (1.75 / 6.8)).sqrt() - 0.04;
        assert!(!filter.retains(-face, 1.75), "panel center survived");
        assert!(filter.retains(-face, 1.42), "panel bottom rows removed");
        let wall_x = 7.0 * (1.0 - (1.75f64 / 6.8) * (1.75 / 6.8)).sqrt();
        // The wall itself (with the simulator's roughness budget) goes away.
        assert!(!filter.retains(wall_x - 0.04, 1.75));
        assert!(!filter.retains(wall_x, 1.75));
    }

    #[test]
    fn exit_light_survival_is_opportunistic() {
        // Panels ride the as-built wall, so how much of a face clears the
        // removal margin varies panel to panel: most show only the bottom
        // strip where the wall bows away under the flat panel, and the local
        // texture stretches or swallows that strip. Detection opportunities
        // exist without being universal.
        let spec = TunnelSpec::default();
        let rules: Vec<FacilityRule> =
            default_rules().into_iter().filter(|r| r.kind == FacilityKind::ExitLight).collect();
        let filter = WallFilter::new(&spec, 0.10);
        let mut strips = Vec::new();
        for seed in 1..=5 {
            let world = World::new(spec.clone(), &rules, seed, 0.04).unwrap();
            for b in &world.boxes {
                let u_face = b.u - b.u.signum() * b.half[0];
                let n = 73;
                let kept = (0..=n)
                    .filter(|i| {
                        let z = b.z - b.half[2] + 2.0 * b.half[2] * *i as f64 / n as f64;
                        filter.retains(u_face, z)
                    })
                    .count();
                strips.push(2.0 * b.half[2] * kept as f64 / (n + 1) as f64);
            }
        }
        assert_eq!(strips.len(), 150);
        let mean = strips.iter().sum::<f64>() / strips.len() as f64;
        let lo = strips.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = strips.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((0.05..=0.30).contains(&mean), "mean exposed strip {mean:.3} out of range");
        assert!(hi - lo >= 0.10, "strips {lo:.3}..{hi:.3} did not vary with the wall");
        assert!(hi <= 0.55, "a panel shows an implausibly tall strip: {hi:.3}");
    }

    #[test]
    fn remove_wall_clears_every_wall_point_of_a_noiseless_scan() {
        // Rough walls, zero sensor noise: the margin must cover the texture.
        let world = World::new(TunnelSpec::default(), &[], 1, 0.04).unwrap();
        let scan = scan_at(&world, 300.0, 0.0, 0.0, &test_lidar());
        let filter = WallFilter::new(&world.spec, 0.10);
        let left = remove_wall(&scan, &filter);
        let wall_left = left.points.iter().filter(|p| p.pos.z > 0.3).count();
        assert_eq!(wall_left, 0, "{wall_left} wall points survived removal");
        assert!(!left.points.is_empty(), "ground should survive");
    }

    proptest! {
        /// Larger margins shrink the retained set (threshold is monotone in
        /// the margin), checked against brute force.
        #[test]
        fn remove_wall_monotone_in_margin(
            pts in prop::collection::vec((-8.0f64..8.0, 0.0f64..8.0), 200),
            m1 in 0.05f64..1.0,
            dm in 0.05f64..1.0,
        ) {
            let small = WallFilter { a: 7.0, b: 6.8, wall_margin: m1 };
            let large = WallFilter { a: 7.0, b: 6.8, wall_margin: m1 + dm };
            for (x, z) in pts {
                if large.retains(x, z) {
                    prop_assert!(small.retains(x, z),
                        "point ({x},{z}) retained at margin {} but not {}", m1 + dm, m1);
                }
            }
        }
    }

    #[test]
    fn classify_roi_bands_and_partition() {
        let spec = TunnelSpec::default();
        let bands = RoiBands::default();
        let mk = |x: f64, z: f64| ScanPoint { pos: Vector3::new(x, 0.0, z), intensity: 120.0 };
        let scan = Scan {
            points: vec![
                mk(6.3, 2.75),  // lamp band, right wall
                mk(-6.6, 1.75), // exit-light band, left wall
                mk(0.0, 5.25),  // ceiling
                mk(0.0, 7.0),   // above everything: discarded
                mk(-3.0, 1.75), // exit-light height but inside the lanes
                mk(6.3, 6.0),   // above ceiling band: discarded
            ],
        };
        let buckets = classify_roi(&scan, &spec, &bands);
        assert_eq!(buckets.lamp.points.len(), 1);
        assert_eq!(buckets.exit_light.points.len(), 1);
        assert_eq!(buckets.ceiling.points.len(), 1);
        assert_relative_eq!(buckets.lamp.points[0].pos.x, 6.3);
        let total =
            buckets.lamp.points.len() + buckets.exit_light.points.len() + buckets.ceiling.points.len();
        assert!(total <= scan.points.len());
    }

    #[test]
    fn cluster_two_lamps_within_tolerance() {
        // Only lamps installed, at a tightened interval so two sit inside
        // detection range at once; stand between them, far enough that both
        // faces fall in the sensor's dense horizon band.
        let rules: Vec<FacilityRule> = default_rules()
            .into_iter()
            .filter(|r| r.kind == FacilityKind::Lamp)
            .map(|r| FacilityRule { interval: 30.0, first: 50.0, ..r })
            .collect();
        let world = World::new(TunnelSpec::default(), &rules, 1, 0.0).unwrap();
        let ctx = default_ctx();
        let s_v = 65.0;
        let scan = scan_at(&world, s_v, 0.0, 0.0, &fine_lidar());
        let ext = extract(&ctx, &scan).unwrap();
        let lamps: Vec<_> =
            ext.facilities.iter().filter(|d| d.kind == FacilityKind::Lamp).collect();
        assert!(lamps.len() >= 2, "expected ≥ 2 lamps, got {}", lamps.len());
        // Every detection sits within 0.15 m (in the road plane) of the
        // road-facing face center of a true lamp: the sensor sees the face,
        // never the hidden body.
        for d in &lamps {
            let best = world
                .boxes
                .iter()
                .map(|b| {
                    let u_face = b.u - b.u.signum() * b.half[0];
                    ((u_face - d.center.x).powi(2) + (b.s - s_v - d.center.y).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 0.15, "lamp center {:.3} m from nearest face", best);
        }
    }

    #[test]
    fn cluster_rejects_undersized_and_oversized() {
        let ctx = default_ctx();
        // Two stray points: below min cluster size.
        let stray = Scan {
            points: (0..2)
                .map(|i| ScanPoint {
                    pos: Vector3::new(6.3, i as f64 * 0.05, 2.7),
                    intensity: 120.0,
                })
                .collect(),
        };
        let mut out = Vec::new();
        cluster_bucket(&ctx, &stray, Some(FacilityKind::Lamp), &mut out);
        assert!(out.is_empty());

        // Jet-fan-shaped blob leaking into the ceiling band: 5 m long, far
        // from any lane center–mounted panel's size.
        let jet = Scan {
            points: (0..60)
                .map(|i| ScanPoint {
                    pos: Vector3::new(2.0 + 0.01 * (i % 3) as f64, -2.45 + i as f64 * 0.085, 5.1),
                    intensity: 120.0,
                })
                .collect(),
        };
        let mut out = Vec::new();
        cluster_bucket(&ctx, &jet, None, &mut out);
        assert!(out.is_empty(), "jet-fan clutter accepted: {out:?}");

        // A genuine LCS-sized face patch above lane 2 is accepted.
        let lcs = Scan {
            points: (0..40)
                .map(|i| ScanPoint {
                    pos: Vector3::new(
                        -0.4 + 0.8 * (i % 8) as f64 / 7.0,
                        25.0 + 0.05 * (i % 2) as f64,
                        4.9 + 0.7 * ((i / 8) % 5) as f64 / 4.0,
                    ),
                    intensity: 120.0,
                })
                .collect(),
        };
        let mut out = Vec::new();
        cluster_bucket(&ctx, &lcs, None, &mut out);
        assert_eq!(out.len(), 1, "LCS cluster not accepted");
        assert_eq!(out[0].kind, FacilityKind::Lcs);
    }

    #[test]
    fn lane_points_are_bright_low_and_near_lines() {
        let world = World::new(TunnelSpec::default(), &[], 1, 0.04).unwrap();
        let ctx = default_ctx();
        let scan = scan_at(&world, 300.0, 0.4, 0.01, &test_lidar());
        let ext = extract(&ctx, &scan).unwrap();
        assert!(!ext.lane_points.is_empty());
        assert!(ext.lane_points.len() <= 500);
        let offsets = world.spec.lane_line_offsets();
        for p in &ext.lane_points {
            assert!(p.z.abs() <= 0.3);
            let nearest = offsets.iter().map(|o| (p.x - o).abs()).fold(f64::INFINITY, f64::min);
            assert!(nearest <= 0.15, "lane point {:.3} m from any line", nearest);
        }
    }

    #[test]
    fn lane_threshold_above_everything_is_empty() {
        let world = bare_world();
        let scan = scan_at(&world, 300.0, 0.0, 0.0, &test_lidar());
        let out = extract_lane_points(&scan, 256.0, 0.3);
        assert!(out.points.is_empty());
    }

    #[test]
    fn extraction_is_deterministic() {
        let world = World::new(TunnelSpec::default(), &default_rules(), 1, 0.04).unwrap();
        let ctx = default_ctx();
        let scan = scan_at(&world, 500.0, -3.6, 0.005, &test_lidar());
        let a = extract(&ctx, &scan).unwrap();
        let b = extract(&ctx, &scan).unwrap();
        assert_eq!(a.facilities.len(), b.facilities.len());
        for (da, db) in a.facilities.iter().zip(&b.facilities) {
            assert_eq!(da.kind, db.kind);
            assert_eq!(da.center, db.center);
            assert_eq!(da.point_count, db.point_count);
        }
        assert_eq!(a.lane_points, b.lane_points);
        assert_eq!(a.alignment.lateral, b.alignment.lateral);
        assert_eq!(a.alignment.yaw, b.alignment.yaw);
    }

    #[test]
    fn full_extraction_finds_facilities_in_a_real_world() {
        let world = World::new(TunnelSpec::default(), &default_rules(), 1, 0.04).unwrap();
        let ctx = default_ctx();
        let scan = scan_at(&world, 500.0, -3.6, 0.0, &LidarModel::default());
        let ext = extract(&ctx, &scan).unwrap();
        assert!(!ext.facilities.is_empty(), "no facilities extracted");
        // Detections sit strictly inside the wall margin, by construction.
        for d in &ext.facilities {
            assert!(ctx.filter.retains(d.center.x, d.center.z), "{d:?} on the wall");
        }
    }
}
