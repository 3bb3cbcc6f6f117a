//! Map-aided vehicle localization in highway tunnels from 3D LIDAR.
//!
//! GNSS is unusable inside a tunnel, and the tunnel interior offers little
//! texture for conventional scan matching: the walls form one long extruded
//! ellipse. What a tunnel *does* have is standardized safety equipment —
//! fire-extinguisher lamps, emergency-exit lights, lane-control signals (LCS),
//! exit signs — installed at regulated intervals, plus painted lane lines.
//! This crate implements a full localization pipeline built on exactly those
//! features:
//!
//! * [`sim`] — a synthetic tunnel world and 32-channel spinning LIDAR,
//!   dead-reckoning and GNSS sensor models, all deterministic per seed;
//! * [`tunnel`] — tunnel geometry (elliptical cross-section over a straight or
//!   constant-curvature centerline), facility placement rules, and the two
//!   maps the matcher consumes: a point-landmark map and a lane-marking
//!   probability-distribution map;
//! * [`extract`] — facility point extraction from a raw scan: wall alignment
//!   against a virtual elliptical cylinder, analytic wall removal, ROI
//!   banding, and k-means clustering into facility detections;
//! * [`registration`] — the matching kernels: point-to-point ICP, gated
//!   nearest-neighbor association, and Newton-optimized NDT against the lane
//!   distribution map;
//! * [`localizer`] — the EKF that fuses dead reckoning with the matcher
//!   outputs, plus the tunnel-entry position compensation that bootstraps it;
//! * [`harness`] — scenario files, end-to-end runs, metrics, CSV/SVG reports,
//!   and a binary record stream for replay.

pub mod extract;
pub mod geom;
pub mod harness;
pub mod localizer;
pub mod registration;
pub mod sim;
pub mod tunnel;
