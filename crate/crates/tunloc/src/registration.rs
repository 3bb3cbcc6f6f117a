//! Matching kernels: point-to-point ICP, gated nearest-neighbor association,
//! and a Newton-optimized point-to-distribution (NDT) matcher.
//!
//! All transforms here are planar: a rotation about the vertical axis plus a
//! horizontal translation. ICP optionally freezes the second translation
//! component (lateral-shift + yaw only), which is how a scan is aligned to the
//! virtual elliptical cylinder — the tunnel constrains those two degrees of
//! freedom and nothing else.

use crate::tunnel::{FacilityKind, LandmarkMap, LaneDistMap};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("ICP diverged: only {corr_percent:.0}% of source points found correspondences")]
    IcpDiverged { corr_percent: f64 },
    #[error("NDT Hessian is numerically singular")]
    NdtIllConditioned,
}

// ---------------------------------------------------------------------------
// kd-tree
// ---------------------------------------------------------------------------

/// Minimal kd-tree for nearest-neighbor queries over fixed-dimension points.
pub struct KdTree<const D: usize> {
    pts: Vec<[f64; D]>,
    // Implicit balanced tree over `order`: the node of a range sits at its
    // midpoint, children occupy the two halves. `order[k]` indexes `pts`.
    order: Vec<usize>,
}

impl<const D: usize> KdTree<D> {
    pub fn build(pts: Vec<[f64; D]>) -> Self {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        build_rec::<D>(&pts, &mut order, 0);
        Self { pts, order }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Index and squared distance of the nearest stored point, or `None` if
    /// the tree is empty.
    pub fn nearest(&self, q: &[f64; D]) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn nearest_rec(
        &self,
        q: &[f64; D],
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut (usize, f64),
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.pts[idx];
        let d2 = dist2::<D>(p, q);
        if d2 < best.1 {
            *best = (idx, d2);
        }
        let axis = depth % D;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, depth + 1, best);
        if delta * delta < best.1 {
            self.nearest_rec(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build_rec<const D: usize>(pts: &[[f64; D]], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % D;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].partial_cmp(&pts[b][axis]).unwrap());
    let (left, rest) = order.split_at_mut(mid);
    build_rec::<D>(pts, left, depth + 1);
    build_rec::<D>(pts, &mut rest[1..], depth + 1);
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------

/// Degrees of freedom for the planar ICP transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpDof {
    /// Lateral translation + yaw (ty frozen at zero): tunnel alignment.
    LateralYaw,
    /// Full planar: tx, ty, yaw.
    PlanarYaw,
}

#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Converged when the accepted parameter step norm falls below this.
    pub tol: f64,
    /// Correspondences farther than this are discarded, meters.
    pub max_corr_dist: f64,
    /// Error out when fewer than this fraction of source points correspond.
    pub min_corr_fraction: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iter: 30, tol: 1e-4, max_corr_dist: 1.0, min_corr_fraction: 0.3 }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub tx: f64,
    pub ty: f64,
    pub psi: f64,
    /// RMS correspondence distance at the final transform, meters.
    pub rms: f64,
    /// Gated-correspondence RMS after each accepted iteration, starting with
    /// the initial transform. Non-increasing by construction.
    pub rms_history: Vec<f64>,
    pub corr_fraction: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl IcpResult {
    pub fn initial_rms(&self) -> f64 {
        self.rms_history.first().copied().unwrap_or(f64::NAN)
    }

    /// Apply the estimated transform to a point (rotation about the origin).
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.psi.sin_cos();
        Vector3::new(c * p.x - s * p.y + self.tx, s * p.x + c * p.y + self.ty, p.z)
    }
}

struct IcpEval {
    rms: f64,
    corr_fraction: f64,
    ata: Matrix3<f64>,
    atb: Vector3<f64>,
}

fn icp_eval(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    tree: &KdTree<3>,
    dof: IcpDof,
    max_corr_dist: f64,
    tx: f64,
    ty: f64,
    psi: f64,
) -> IcpEval {
    let (s, c) = psi.sin_cos();
    let n_par = if dof == IcpDof::PlanarYaw { 3 } else { 2 };
    let mut n_corr = 0usize;
    let mut sum_sq = 0.0f64;
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in source {
        let px = c * p.x - s * p.y + tx;
        let py = s * p.x + c * p.y + ty;
        let Some((ti, d2)) = tree.nearest(&[px, py, p.z]) else { continue };
        if d2 > max_corr_dist * max_corr_dist {
            continue;
        }
        n_corr += 1;
        sum_sq += d2;
        let q = &target[ti];
        let rx = px - q.x;
        let ry = py - q.y;
        // Jacobian columns of the transformed point: d/dtx = (1,0);
        // d/dty = (0,1); d/dpsi = quarter-turn of the rotated point
        // (rotation acts about the origin, translation excluded).
        let jpx = -(py - ty);
        let jpy = px - tx;
        let (row_x, row_y): ([f64; 3], [f64; 3]) = if dof == IcpDof::PlanarYaw {
            ([1.0, 0.0, jpx], [0.0, 1.0, jpy])
        } else {
            ([1.0, jpx, 0.0], [0.0, jpy, 0.0])
        };
        for i in 0..n_par {
            for j in 0..n_par {
                ata[(i, j)] += row_x[i] * row_x[j] + row_y[i] * row_y[j];
            }
            atb[i] -= row_x[i] * rx + row_y[i] * ry;
        }
    }
    let corr_fraction = if source.is_empty() { 0.0 } else { n_corr as f64 / source.len() as f64 };
    let rms = if n_corr == 0 { f64::INFINITY } else { (sum_sq / n_corr as f64).sqrt() };
    IcpEval { rms, corr_fraction, ata, atb }
}

/// Point-to-point ICP between 3D clouds under a planar transform: alternate
/// gated nearest-neighbor correspondence with a linearized least-squares
/// solve, accepting only steps that do not increase the correspondence RMS.
pub fn icp(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    dof: IcpDof,
    params: &IcpParams,
) -> Result<IcpResult, RegError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegError::IcpDiverged { corr_percent: 0.0 });
    }
    let tree = KdTree::<3>::build(target.iter().map(|p| [p.x, p.y, p.z]).collect());
    icp_with_target_tree(source, target, &tree, dof, params)
}

/// [`icp`] against a pre-indexed target: callers matching many scans to the
/// same reference cloud build its tree once and pass it in. `tree` must index
/// `target` in order.
pub fn icp_with_target_tree(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    tree: &KdTree<3>,
    dof: IcpDof,
    params: &IcpParams,
) -> Result<IcpResult, RegError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegError::IcpDiverged { corr_percent: 0.0 });
    }

    let mut tx = 0.0f64;
    let mut ty = 0.0f64;
    let mut psi = 0.0f64;
    let mut cur = icp_eval(source, target, &tree, dof, params.max_corr_dist, tx, ty, psi);
    if cur.corr_fraction < params.min_corr_fraction {
        return Err(RegError::IcpDiverged { corr_percent: cur.corr_fraction * 100.0 });
    }
    let mut rms_history = vec![cur.rms];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iter {
        iterations = iter + 1;
        // Solve the (possibly reduced) normal equations at the current state.
        let delta = if dof == IcpDof::PlanarYaw {
            match cur.ata.try_inverse() {
                Some(inv) => inv * cur.atb,
                None => break,
            }
        } else {
            let a =
                Matrix2::new(cur.ata[(0, 0)], cur.ata[(0, 1)], cur.ata[(1, 0)], cur.ata[(1, 1)]);
            match a.try_inverse() {
                Some(inv) => {
                    let d = inv * Vector2::new(cur.atb[0], cur.atb[1]);
                    Vector3::new(d.x, d.y, 0.0)
                }
                None => break,
            }
        };
        let (dtx, dty, dpsi) = if dof == IcpDof::PlanarYaw {
            (delta[0], delta[1], delta[2])
        } else {
            (delta[0], 0.0, delta[1])
        };

        // Backtrack until the step no longer increases the gated RMS.
        let mut alpha = 1.0f64;
        let mut accepted = None;
        loop {
            let cand = icp_eval(
                source,
                target,
                &tree,
                dof,
                params.max_corr_dist,
                tx + alpha * dtx,
                ty + alpha * dty,
                psi + alpha * dpsi,
            );
            if cand.corr_fraction >= params.min_corr_fraction && cand.rms <= cur.rms + 1e-12 {
                accepted = Some((alpha, cand));
                break;
            }
            alpha *= 0.5;
            if alpha * delta.norm() < 0.5 * params.tol {
                break;
            }
        }
        let Some((alpha, cand)) = accepted else { break };
        tx += alpha * dtx;
        ty += alpha * dty;
        psi += alpha * dpsi;
        cur = cand;
        rms_history.push(cur.rms);
        if alpha * delta.norm() < params.tol {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        tx,
        ty,
        psi,
        rms: cur.rms,
        rms_history,
        corr_fraction: cur.corr_fraction,
        iterations,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Association
// ---------------------------------------------------------------------------

/// Associate lane points with lane-map Gaussians: nearest mean by Euclidean
/// distance within `euclid_gate`, then a Mahalanobis gate under that
/// Gaussian's covariance. Returns `(point index, gaussian index)` pairs.
pub fn associate_lane(
    points: &[Vector2<f64>],
    map: &LaneDistMap,
    euclid_gate: f64,
    maha_gate: f64,
) -> Vec<(usize, usize)> {
    if map.gaussians.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::<2>::build(map.gaussians.iter().map(|g| [g.mean.x, g.mean.y]).collect());
    let mut pairs = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        let Some((gi, d2)) = tree.nearest(&[p.x, p.y]) else { continue };
        if d2 > euclid_gate * euclid_gate {
            continue;
        }
        let g = &map.gaussians[gi];
        let Some(inv) = g.cov.try_inverse() else { continue };
        let d = p - g.mean;
        let m2 = (d.transpose() * inv * d)[(0, 0)];
        if m2 <= maha_gate * maha_gate {
            pairs.push((pi, gi));
        }
    }
    pairs
}

/// Associate facility detections with map landmarks: same kind, within
/// `gate` meters, greedy one-to-one by ascending distance. Returns
/// `(detection index, landmark index)` pairs sorted by detection index.
pub fn associate_landmarks(
    detections: &[(FacilityKind, Vector2<f64>)],
    map: &LandmarkMap,
    gate: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (di, (kind, pos)) in detections.iter().enumerate() {
        for (li, lm) in map.landmarks.iter().enumerate() {
            if lm.kind != *kind {
                continue;
            }
            let d = (pos - lm.pos).norm();
            if d <= gate {
                candidates.push((d, di, li));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut used_det = vec![false; detections.len()];
    let mut used_lm = vec![false; map.landmarks.len()];
    let mut pairs = Vec::new();
    for (_, di, li) in candidates {
        if used_det[di] || used_lm[li] {
            continue;
        }
        used_det[di] = true;
        used_lm[li] = true;
        pairs.push((di, li));
    }
    pairs.sort_unstable();
    pairs
}

// ---------------------------------------------------------------------------
// NDT
// ---------------------------------------------------------------------------

/// A small rigid correction produced by the NDT matcher.
#[derive(Debug, Clone, Copy)]
pub struct RigidCorrection {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub converged: bool,
    /// Sum of Gaussian responses at the returned correction (higher is
    /// better; at a perfect match it approaches the number of pairs).
    pub score: f64,
}

impl RigidCorrection {
    fn identity() -> Self {
        Self { dx: 0.0, dy: 0.0, dpsi: 0.0, converged: false, score: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NdtParams {
    pub max_iter: usize,
    /// Newton convergence: accepted step norm below this.
    pub step_tol: f64,
    /// Association gate: nearest Gaussian mean within this many meters. The
    /// probability weighting itself is the soft gate — points far from their
    /// distribution contribute exponentially little — so no hard Mahalanobis
    /// cut is applied here, or large lateral offsets could never be pulled
    /// back in.
    pub euclid_gate: f64,
    /// Below this many associated points the matcher reports a non-converged
    /// identity correction rather than an unstable solve.
    pub min_points: usize,
}

impl Default for NdtParams {
    fn default() -> Self {
        Self { max_iter: 20, step_tol: 1e-4, euclid_gate: 2.0, min_points: 10 }
    }
}

/// Full NDT output: the correction plus the (unregularized) Hessian of the
/// score at the solution, whose curvature per direction tells the caller how
/// well each degree of freedom is constrained.
#[derive(Debug, Clone)]
pub struct NdtResult {
    pub correction: RigidCorrection,
    pub hessian: Matrix3<f64>,
    pub n_pairs: usize,
}

/// One point/Gaussian pair prepared for the NDT objective.
struct NdtPair {
    w: Vector2<f64>, // point relative to the pivot
    mu: Vector2<f64>,
    inv_cov: Matrix2<f64>,
}

/// Match points (already in the map frame, e.g. transformed by the current
/// pose estimate) against the lane distribution map, maximizing the summed
/// Gaussian response by Newton ascent with analytic gradient and Hessian.
///
/// The returned correction rotates about `pivot` — pass the current position
/// estimate so yaw does not couple into translation through a long lever arm.
/// Each point is associated once, to its nearest distribution.
pub fn ndt_match(
    points: &[Vector2<f64>],
    map: &LaneDistMap,
    pivot: Vector2<f64>,
    params: &NdtParams,
) -> Result<NdtResult, RegError> {
    let assoc = associate_lane(points, map, params.euclid_gate, f64::INFINITY);
    let pairs: Vec<NdtPair> = assoc
        .iter()
        .filter_map(|&(pi, gi)| {
            let g = &map.gaussians[gi];
            g.cov.try_inverse().map(|inv| NdtPair {
                w: points[pi] - pivot,
                mu: g.mean - pivot,
                inv_cov: inv,
            })
        })
        .collect();
    if pairs.len() < params.min_points {
        let mut correction = RigidCorrection::identity();
        correction.score = ndt_objective(&pairs, &Vector3::zeros()).0;
        return Ok(NdtResult { correction, hessian: Matrix3::zeros(), n_pairs: pairs.len() });
    }

    let mut theta = Vector3::<f64>::zeros();
    let mut converged = false;
    let (mut score, mut grad, mut hess) = ndt_objective(&pairs, &theta);
    for _ in 0..params.max_iter {
        // Regularize the Hessian to negative definite before the Newton
        // ascent step. The floor is relative to the largest curvature so the
        // absolute score scale (which shrinks exponentially with misfit)
        // cancels out of the step.
        let eig = nalgebra::SymmetricEigen::new(hess);
        let lam_max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
        if !(lam_max_abs > 0.0) || !lam_max_abs.is_finite() {
            return Err(RegError::NdtIllConditioned);
        }
        let floor = -1e-6 * lam_max_abs;
        let mut neg = eig.eigenvalues;
        for l in neg.iter_mut() {
            if *l > floor {
                *l = floor;
            }
        }
        let h_reg = eig.eigenvectors * Matrix3::from_diagonal(&neg) * eig.eigenvectors.transpose();
        let Some(inv) = h_reg.try_inverse() else {
            return Err(RegError::NdtIllConditioned);
        };
        let dir = -(inv * grad);

        // Backtracking line search on the score; give up once the remaining
        // step is below convergence resolution.
        let mut alpha = 1.0f64;
        let mut improved = false;
        while alpha * dir.norm() >= 0.5 * params.step_tol {
            let cand = theta + alpha * dir;
            let (s_new, g_new, h_new) = ndt_objective(&pairs, &cand);
            if s_new > score {
                theta = cand;
                score = s_new;
                grad = g_new;
                hess = h_new;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            // Local optimum within line-search resolution.
            converged = true;
            break;
        }
        if (alpha * dir).norm() < params.step_tol {
            converged = true;
            break;
        }
    }

    Ok(NdtResult {
        correction: RigidCorrection {
            dx: theta[0],
            dy: theta[1],
            dpsi: theta[2],
            converged,
            score,
        },
        hessian: hess,
        n_pairs: pairs.len(),
    })
}

/// Score, gradient, and Hessian of the NDT objective at `theta = (tx, ty,
/// dpsi)`: `sum_i exp(-0.5 q_i' inv_cov_i q_i)` where `q_i = R(dpsi) w_i + t
/// - mu_i` and all positions are pre-shifted by the pivot.
fn ndt_objective(pairs: &[NdtPair], theta: &Vector3<f64>) -> (f64, Vector3<f64>, Matrix3<f64>) {
    let t = Vector2::new(theta[0], theta[1]);
    let (sn, cs) = theta[2].sin_cos();
    let mut score = 0.0;
    let mut grad = Vector3::zeros();
    let mut hess = Matrix3::zeros();
    for pair in pairs {
        let r = Vector2::new(cs * pair.w.x - sn * pair.w.y, sn * pair.w.x + cs * pair.w.y);
        let q = r + t - pair.mu;
        let aq = pair.inv_cov * q;
        let e = (-0.5 * q.dot(&aq)).exp();
        score += e;
        // Jacobian columns of q wrt theta: e_x, e_y, and dq/dpsi = rot90(r).
        let j2 = Vector2::new(-r.y, r.x);
        let qaj = Vector3::new(aq.x, aq.y, aq.dot(&j2));
        grad -= e * qaj;
        let aj2 = pair.inv_cov * j2;
        #[rustfmt::skip]
        let jaj = Matrix3::new(
            pair.inv_cov[(0, 0)], pair.inv_cov[(0, 1)], aj2.x,
            pair.inv_cov[(1, 0)], pair.inv_cov[(1, 1)], aj2.y,
            aj2.x,                aj2.y,                j2.dot(&aj2),
        );
        // Second derivative of q is nonzero only in the (psi, psi) slot: -r.
        let mut qah = Matrix3::zeros();
        qah[(2, 2)] = -aq.dot(&r);
        hess += e * (qaj * qaj.transpose() - jaj - qah);
    }
    (score, grad, hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotate2;
    use crate::tunnel::{LaneDistMap, LaneGaussian};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // -- kd-tree ------------------------------------------------------------

    proptest! {
        #[test]
        fn kdtree_matches_linear_scan(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..120),
            q in (-60.0f64..60.0, -60.0f64..60.0),
        ) {
            let arr: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let tree = KdTree::<2>::build(arr.clone());
            let (bi, bd) = tree.nearest(&[q.0, q.1]).unwrap();
            let lin = arr
                .iter()
                .map(|p| (p[0] - q.0).powi(2) + (p[1] - q.1).powi(2))
                .fold(f64::INFINITY, f64::min);
            prop_assert!((bd - lin).abs() < 1e-12);
            prop_assert!((dist2(&arr[bi], &[q.0, q.1]) - lin).abs() < 1e-12);
        }
    }

    // -- ICP ----------------------------------------------------------------

    fn cylinder_cloud() -> Vec<Vector3<f64>> {
        crate::tunnel::virtual_cylinder(7.0, 6.8, 40.0, 2.0, 2.0)
    }

    #[test]
    fn icp_identity_converges_first_iteration() {
        let target = cylinder_cloud();
        let res = icp(&target, &target, IcpDof::LateralYaw, &IcpParams::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.tx.abs() < 1e-9);
        assert!(res.psi.abs() < 1e-10);
        assert!(res.rms < 1e-9);
    }

    #[test]
    fn icp_recovers_lateral_offset_and_yaw() {
        // Source = cylinder displaced by (0.5 m, 2 deg); the mapping back onto
        // the cylinder is the inverse of that displacement.
        let target = cylinder_cloud();
        let dx = 0.5;
        let dpsi = 2.0f64.to_radians();
        let source: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| {
                let xy = rotate2(Vector2::new(p.x, p.y), dpsi) + Vector2::new(dx, 0.0);
                Vector3::new(xy.x, xy.y, p.z)
            })
            .collect();
        let res = icp(&source, &target, IcpDof::PlanarYaw, &IcpParams::default()).unwrap();
        assert!(res.converged, "no convergence: {res:?}");
        // Inverse transform: rotate by -dpsi, then translate by -R(-dpsi)*t.
        let t_inv = -rotate2(Vector2::new(dx, 0.0), -dpsi);
        assert!((res.psi + dpsi).abs() < 1e-4, "psi {} vs {}", res.psi, -dpsi);
        assert!((res.tx - t_inv.x).abs() < 1e-3, "tx {} vs {}", res.tx, t_inv.x);
        assert!((res.ty - t_inv.y).abs() < 1e-3, "ty {} vs {}", res.ty, t_inv.y);
    }

    #[test]
    fn icp_two_dof_keeps_ty_zero() {
        let target = cylinder_cloud();
        let source: Vec<Vector3<f64>> =
            target.iter().map(|p| Vector3::new(p.x + 0.8, p.y, p.z)).collect();
        let res = icp(&source, &target, IcpDof::LateralYaw, &IcpParams::default()).unwrap();
        assert_eq!(res.ty, 0.0);
        assert!((res.tx + 0.8).abs() < 1e-3, "tx {}", res.tx);
        assert!(res.psi.abs() < 1e-4);
    }

    #[test]
    fn icp_rms_non_increasing_with_noisy_source() {
        let target = cylinder_cloud();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dpsi = 1.0f64.to_radians();
        let source: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| {
                let xy = rotate2(Vector2::new(p.x, p.y), dpsi) + Vector2::new(0.3, 0.0);
                Vector3::new(
                    xy.x + rng.random_range(-0.02..0.02),
                    xy.y + rng.random_range(-0.02..0.02),
                    p.z + rng.random_range(-0.02..0.02),
                )
            })
            .collect();
        let res = icp(&source, &target, IcpDof::PlanarYaw, &IcpParams::default()).unwrap();
        assert!(res.rms_history.len() >= 2);
        for w in res.rms_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "rms increased: {:?}", res.rms_history);
        }
        assert!(res.rms < res.initial_rms());
    }

    #[test]
    fn icp_rejects_disjoint_clouds() {
        let target = cylinder_cloud();
        let source: Vec<Vector3<f64>> =
            target.iter().map(|p| Vector3::new(p.x + 500.0, p.y, p.z)).collect();
        match icp(&source, &target, IcpDof::PlanarYaw, &IcpParams::default()) {
            Err(RegError::IcpDiverged { .. }) => {}
            other => panic!("expected IcpDiverged, got {other:?}"),
        }
    }

    // -- association ---------------------------------------------------------

    fn line_map() -> LaneDistMap {
        // A straight solid line along x at y = 0, 5 m segments.
        let mut gaussians = Vec::new();
        for k in 0..40 {
            let mean = Vector2::new(2.5 + 5.0 * k as f64, 0.0);
            let cov = Matrix2::new(25.0 / 12.0, 0.0, 0.0, 0.075f64.powi(2));
            gaussians.push(LaneGaussian { mean, cov });
        }
        LaneDistMap { gaussians, segment_len: 5.0 }
    }

    proptest! {
        #[test]
        fn associate_lane_matches_exhaustive_oracle(
            pts in prop::collection::vec((0.0f64..200.0, -4.0f64..4.0), 1..60),
        ) {
            let map = line_map();
            let points: Vec<Vector2<f64>> = pts.iter().map(|&(x, y)| Vector2::new(x, y)).collect();
            let fast = associate_lane(&points, &map, 2.0, 3.0);
            // Oracle: exhaustive nearest + the same gates.
            let mut slow = Vec::new();
            for (pi, p) in points.iter().enumerate() {
                let (gi, d2) = map
                    .gaussians
                    .iter()
                    .enumerate()
                    .map(|(gi, g)| (gi, (p - g.mean).norm_squared()))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                if d2 <= 4.0 {
                    let g = &map.gaussians[gi];
                    let d = p - g.mean;
                    let m2 = (d.transpose() * g.cov.try_inverse().unwrap() * d)[(0, 0)];
                    if m2 <= 9.0 {
                        slow.push((pi, gi));
                    }
                }
            }
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn associate_landmarks_matches_optimal_on_separated_instances(
            seed in 0u64..500,
            n in 1usize..4,
        ) {
            // Landmarks of one kind are never closer than half their regulated
            // interval (25 m), far beyond the 3 m gate, so each detection has
            // at most one candidate and greedy = optimal assignment.
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut map = LandmarkMap::default();
            for k in 0..6 {
                map.landmarks.push(crate::tunnel::Landmark {
                    kind: FacilityKind::Lamp,
                    pos: Vector2::new(50.0 * k as f64, rng.random_range(-1.0..1.0)),
                    height: 2.75,
                });
            }
            let mut dets = Vec::new();
            for _ in 0..n {
                let li = rng.random_range(0..map.landmarks.len());
                let jitter = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                dets.push((FacilityKind::Lamp, map.landmarks[li].pos + jitter));
            }
            let fast = associate_landmarks(&dets, &map, 3.0);
            let best = brute_force_assignment(&dets, &map, 3.0);
            prop_assert_eq!(fast.len(), best.len());
            let total = |pairs: &[(usize, usize)]| -> f64 {
                pairs.iter().map(|&(d, l)| (dets[d].1 - map.landmarks[l].pos).norm()).sum()
            };
            prop_assert!((total(&fast) - total(&best)).abs() < 1e-9);
        }
    }

    #[test]
    fn associate_landmarks_never_crosses_kinds() {
        let mut map = LandmarkMap::default();
        map.landmarks.push(crate::tunnel::Landmark {
            kind: FacilityKind::ExitLight,
            pos: Vector2::new(10.0, 0.0),
            height: 1.75,
        });
        let dets = vec![(FacilityKind::Lamp, Vector2::new(10.1, 0.0))];
        assert!(associate_landmarks(&dets, &map, 3.0).is_empty());
    }

    /// Exhaustive max-cardinality, min-cost one-to-one assignment (small n).
    fn brute_force_assignment(
        dets: &[(FacilityKind, Vector2<f64>)],
        map: &LandmarkMap,
        gate: f64,
    ) -> Vec<(usize, usize)> {
        fn rec(
            di: usize,
            dets: &[(FacilityKind, Vector2<f64>)],
            map: &LandmarkMap,
            gate: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            best: &mut (usize, f64, Vec<(usize, usize)>),
        ) {
            if di == dets.len() {
                let cost: f64 = cur
                    .iter()
                    .map(|&(d, l)| (dets[d].1 - map.landmarks[l].pos).norm())
                    .sum();
                if cur.len() > best.0 || (cur.len() == best.0 && cost < best.1) {
                    *best = (cur.len(), cost, cur.clone());
                }
                return;
            }
            rec(di + 1, dets, map, gate, used, cur, best); // leave unmatched
            for (li, lm) in map.landmarks.iter().enumerate() {
                if used[li] || lm.kind != dets[di].0 {
                    continue;
                }
                if (dets[di].1 - lm.pos).norm() > gate {
                    continue;
                }
                used[li] = true;
                cur.push((di, li));
                rec(di + 1, dets, map, gate, used, cur, best);
                cur.pop();
                used[li] = false;
            }
        }
        let mut used = vec![false; map.landmarks.len()];
        let mut cur = Vec::new();
        let mut best = (0usize, f64::INFINITY, Vec::new());
        rec(0, dets, map, gate, &mut used, &mut cur, &mut best);
        let mut pairs = best.2;
        pairs.sort_unstable();
        pairs
    }

    // -- NDT ----------------------------------------------------------------

    /// Dashes staggered between two lines: isolated blobs constrain all three
    /// degrees of freedom, and the 4 m stagger keeps nearest-mean association
    /// unambiguous for moderate offsets.
    fn dashed_map() -> LaneDistMap {
        let mut gaussians = Vec::new();
        for k in 0..16 {
            let cov = Matrix2::new(0.36, 0.0, 0.0, 0.075f64.powi(2));
            gaussians.push(LaneGaussian { mean: Vector2::new(8.0 * k as f64, -1.8), cov });
            gaussians.push(LaneGaussian { mean: Vector2::new(4.0 + 8.0 * k as f64, 1.8), cov });
        }
        LaneDistMap { gaussians, segment_len: 8.0 }
    }

    #[test]
    fn ndt_zero_correction_on_means() {
        let map = dashed_map();
        let points: Vec<Vector2<f64>> = map.gaussians.iter().map(|g| g.mean).collect();
        let pivot = Vector2::new(60.0, 0.0);
        let res = ndt_match(&points, &map, pivot, &NdtParams::default()).unwrap();
        assert!(res.correction.converged);
        assert!(res.correction.dx.abs() < 1e-9);
        assert!(res.correction.dy.abs() < 1e-9);
        assert!(res.correction.dpsi.abs() < 1e-10);
        assert_relative_eq!(res.correction.score, map.gaussians.len() as f64, epsilon = 1e-9);
    }

    #[test]
    fn ndt_recovers_rigid_offsets() {
        let map = dashed_map();
        let pivot = Vector2::new(60.0, 0.0);
        let params = NdtParams { max_iter: 80, euclid_gate: 3.0, ..Default::default() };
        let cases = [
            (0.3, -0.2, 1.0f64.to_radians()),
            (-0.8, 0.5, -3.0f64.to_radians()),
            (1.0, 1.0, 5.0f64.to_radians()),
        ];
        for (dx, dy, dpsi) in cases {
            // Displace map means rigidly (about the pivot); NDT must recover
            // the inverse so that correction ∘ displacement = identity.
            let fwd = |p: Vector2<f64>| rotate2(p - pivot, dpsi) + pivot + Vector2::new(dx, dy);
            let points: Vec<Vector2<f64>> = map.gaussians.iter().map(|g| fwd(g.mean)).collect();
            let res = ndt_match(&points, &map, pivot, &params).unwrap();
            let corr = |p: Vector2<f64>| {
                rotate2(p - pivot, res.correction.dpsi)
                    + pivot
                    + Vector2::new(res.correction.dx, res.correction.dy)
            };
            for probe in [Vector2::new(52.0, 1.8), Vector2::new(70.0, -1.8)] {
                let round = corr(fwd(probe));
                assert!(
                    (round - probe).norm() < 0.02,
                    "net displacement {} for case ({dx},{dy},{dpsi})",
                    (round - probe).norm()
                );
            }
            assert!(
                (res.correction.dpsi + dpsi).abs() < 0.002,
                "dpsi {} for case ({dx},{dy},{dpsi})",
                res.correction.dpsi
            );
        }
    }

    #[test]
    fn ndt_lateral_shift_across_solid_line() {
        // All points 0.4 m off a solid line, laterally: the lateral component
        // must be recovered; the along-line direction is unconstrained and
        // must not drift.
        let map = line_map();
        let points: Vec<Vector2<f64>> =
            map.gaussians.iter().map(|g| g.mean + Vector2::new(0.0, 0.4)).collect();
        let pivot = Vector2::new(100.0, 0.0);
        let res =
            ndt_match(&points, &map, pivot, &NdtParams { max_iter: 80, ..Default::default() })
                .unwrap();
        assert!((res.correction.dy + 0.4).abs() < 1e-3, "dy {}", res.correction.dy);
        assert!(res.correction.dx.abs() < 1e-6, "dx drifted: {}", res.correction.dx);
    }

    #[test]
    fn ndt_gradient_and_hessian_match_finite_differences() {
        let map = dashed_map();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let pivot = Vector2::new(60.0, 0.0);
        // Points near means with scatter, association fixed once.
        let points: Vec<Vector2<f64>> = map
            .gaussians
            .iter()
            .map(|g| {
                g.mean + Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.06..0.06))
            })
            .collect();
        let assoc = associate_lane(&points, &map, 2.0, f64::INFINITY);
        let pairs: Vec<NdtPair> = assoc
            .iter()
            .map(|&(pi, gi)| NdtPair {
                w: points[pi] - pivot,
                mu: map.gaussians[gi].mean - pivot,
                inv_cov: map.gaussians[gi].cov.try_inverse().unwrap(),
            })
            .collect();
        for _ in 0..20 {
            let theta = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.02..0.02),
            );
            let (_, grad, hess) = ndt_objective(&pairs, &theta);
            let h = 1e-6;
            for a in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[a] += h;
                tm[a] -= h;
                let (sp, gp, _) = ndt_objective(&pairs, &tp);
                let (sm, gm, _) = ndt_objective(&pairs, &tm);
                let fd = (sp - sm) / (2.0 * h);
                let rel = (grad[a] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "gradient[{a}] {} vs fd {}", grad[a], fd);
                for b in 0..3 {
                    let fdh = (gp[b] - gm[b]) / (2.0 * h);
                    let rel = (hess[(b, a)] - fdh).abs() / fdh.abs().max(1e-3);
                    assert!(rel < 1e-3, "hessian[{b},{a}] {} vs fd {}", hess[(b, a)], fdh);
                }
            }
        }
    }

    #[test]
    fn ndt_single_solid_line_is_longitudinally_degenerate() {
        // Lane points spread uniformly along a solid line: the Hessian's
        // along-line curvature nearly cancels (points ahead of and behind
        // each segment mean pull oppositely) while the cross-line curvature
        // stays razor sharp.
        let map = line_map();
        let mut points = Vec::new();
        let mut x = 0.0;
        while x <= 200.0 {
            points.push(Vector2::new(x, 0.0));
            x += 0.25;
        }
        let params = NdtParams { euclid_gate: 3.0, ..Default::default() };
        let res = ndt_match(&points, &map, Vector2::new(100.0, 0.0), &params).unwrap();
        let h = res.hessian;
        let block = Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
        let eig = nalgebra::SymmetricEigen::new(block);
        let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l.abs()));
        let hi = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
        assert!(lo <= 1e-3 * hi, "along/cross curvature ratio {} not degenerate", lo / hi);
    }

    #[test]
    fn ndt_score_never_below_initial() {
        let map = dashed_map();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let points: Vec<Vector2<f64>> = map
            .gaussians
            .iter()
            .map(|g| {
                g.mean + Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1))
            })
            .collect();
        let pivot = Vector2::new(60.0, 0.0);
        let assoc = associate_lane(&points, &map, 2.0, f64::INFINITY);
        let pairs: Vec<NdtPair> = assoc
            .iter()
            .map(|&(pi, gi)| NdtPair {
                w: points[pi] - pivot,
                mu: map.gaussians[gi].mean - pivot,
                inv_cov: map.gaussians[gi].cov.try_inverse().unwrap(),
            })
            .collect();
        let (s0, _, _) = ndt_objective(&pairs, &Vector3::zeros());
        let res = ndt_match(&points, &map, pivot, &NdtParams::default()).unwrap();
        assert!(res.correction.score >= s0 - 1e-12);
    }

    #[test]
    fn ndt_too_few_points_returns_identity() {
        let map = dashed_map();
        let points = vec![Vector2::new(0.0, -1.8); 3];
        let res = ndt_match(&points, &map, Vector2::zeros(), &NdtParams::default()).unwrap();
        assert!(!res.correction.converged);
        assert_eq!(res.correction.dx, 0.0);
        assert_eq!(res.correction.dy, 0.0);
        assert_eq!(res.correction.dpsi, 0.0);
        assert_eq!(res.n_pairs, 3);
    }
}
